//! Identical internal randomness for the two halves of an original/noisy pair.
//!
//! Each family of random decisions owns one [`RngStream`]. Before the
//! original half draws, every stream is snapshotted; before the noisy half
//! draws, the streams of paired families are rewound to that snapshot, so the
//! noisy half replays the same decisions. Unpaired families keep advancing
//! and the noisy half gets fresh draws.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::rng::{streams, RandomSource, RngState, RngStream};

/// A group of random decisions that can be paired or unpaired as a unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Family {
    MaskPositions,
    DropoutMasks,
    GumbelNoise,
    Distractors,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::MaskPositions,
        Family::DropoutMasks,
        Family::GumbelNoise,
        Family::Distractors,
    ];

    pub fn stream_id(self) -> u64 {
        match self {
            Family::MaskPositions => streams::MASK,
            Family::DropoutMasks => streams::DROPOUT,
            Family::GumbelNoise => streams::GUMBEL,
            Family::Distractors => streams::DISTRACTOR,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::MaskPositions => "mask",
            Family::DropoutMasks => "dropout",
            Family::GumbelNoise => "gumbel",
            Family::Distractors => "distractors",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which families are replayed for the noisy half.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairingMode {
    pub mask_positions: bool,
    pub dropout_masks: bool,
    pub gumbel_noise: bool,
    pub distractors: bool,
}

impl Default for PairingMode {
    fn default() -> Self {
        Self::all_on()
    }
}

impl PairingMode {
    pub fn all_on() -> Self {
        PairingMode {
            mask_positions: true,
            dropout_masks: true,
            gumbel_noise: true,
            distractors: true,
        }
    }

    pub fn is_paired(&self, family: Family) -> bool {
        match family {
            Family::MaskPositions => self.mask_positions,
            Family::DropoutMasks => self.dropout_masks,
            Family::GumbelNoise => self.gumbel_noise,
            Family::Distractors => self.distractors,
        }
    }
}

/// The persistent per-family streams of a training run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FamilyStreams {
    streams: BTreeMap<Family, RngStream>,
}

impl FamilyStreams {
    pub fn new(seed: u64) -> Self {
        FamilyStreams {
            streams: Family::ALL
                .iter()
                .map(|&f| (f, RngStream::new(seed, f.stream_id())))
                .collect(),
        }
    }

    pub fn stream(&self, family: Family) -> &RngStream {
        &self.streams[&family]
    }

    pub fn stream_mut(&mut self, family: Family) -> &mut RngStream {
        self.streams.get_mut(&family).expect("all families present")
    }

    pub fn states(&self) -> Vec<(Family, RngState)> {
        self.streams.iter().map(|(&f, s)| (f, s.save_state())).collect()
    }

    pub fn restore_states(&mut self, states: &[(Family, RngState)]) -> Result<()> {
        for &(f, st) in states {
            self.stream_mut(f).restore_state(st)?;
        }
        Ok(())
    }
}

/// Snapshots of the family streams taken at the start of a pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairScope {
    snapshots: Vec<(Family, RngState)>,
}

impl PairScope {
    pub fn enter(streams: &FamilyStreams) -> Self {
        PairScope {
            snapshots: streams.states(),
        }
    }

    pub fn snapshots(&self) -> &[(Family, RngState)] {
        &self.snapshots
    }

    /// Rewind every captured stream whose family satisfies `which`.
    pub fn restore(&self, streams: &mut FamilyStreams, which: impl Fn(Family) -> bool) -> Result<()> {
        for &(f, st) in &self.snapshots {
            if which(f) {
                streams.stream_mut(f).restore_state(st)?;
            }
        }
        Ok(())
    }
}

/// Count and FNV-1a digest of every 64-bit output drawn by one family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FamilyLog {
    pub draws: u64,
    pub digest: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Default for FamilyLog {
    fn default() -> Self {
        FamilyLog {
            draws: 0,
            digest: FNV_OFFSET,
        }
    }
}

impl FamilyLog {
    fn record(&mut self, v: u64) {
        self.draws += 1;
        for byte in v.to_le_bytes() {
            self.digest ^= u64::from(byte);
            self.digest = self.digest.wrapping_mul(FNV_PRIME);
        }
    }
}

/// Decision transcript of one half: what each family drew.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Transcript {
    logs: BTreeMap<Family, FamilyLog>,
}

impl Transcript {
    pub fn log(&self, family: Family) -> FamilyLog {
        self.logs.get(&family).copied().unwrap_or_default()
    }

    pub fn families(&self) -> impl Iterator<Item = (Family, FamilyLog)> + '_ {
        self.logs.iter().map(|(&f, &l)| (f, l))
    }
}

/// A family stream that records every output it hands out.
pub struct RecordingStream<'a> {
    stream: &'a mut RngStream,
    log: &'a mut FamilyLog,
}

impl RandomSource for RecordingStream<'_> {
    fn next_u64(&mut self) -> u64 {
        let v = self.stream.next_u64();
        self.log.record(v);
        v
    }
}

/// Access to the declared family streams for one half of a pair.
pub struct DecisionSource<'a> {
    streams: &'a mut FamilyStreams,
    declared: &'a [Family],
    transcript: Transcript,
}

impl<'a> DecisionSource<'a> {
    /// The recording stream of `family`; errors if the scope did not declare it.
    pub fn stream(&mut self, family: Family) -> Result<RecordingStream<'_>> {
        if !self.declared.contains(&family) {
            return Err(Error::usage(format!(
                "decision function drew from undeclared stream '{family}'"
            )));
        }
        Ok(RecordingStream {
            stream: self.streams.stream_mut(family),
            log: self.transcript.logs.entry(family).or_default(),
        })
    }
}

/// Which half of the pair a decision function is producing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Half {
    Original,
    Noisy,
}

/// Outputs and transcripts of both halves of a paired pass.
#[derive(Clone, Debug)]
pub struct PairedOutput<O> {
    pub original: O,
    pub noisy: O,
    pub original_transcript: Transcript,
    pub noisy_transcript: Transcript,
}

/// Runs `decisions_fn` once per half with the save/restore protocol.
///
/// `decisions_fn` receives the half, a source restricted to `declared`
/// families, and (for the noisy half) the original half's output. For every
/// family paired in `mode`, the noisy half replays the original's draws bit
/// for bit; for unpaired families it draws fresh values.
pub fn paired_forward<O, F>(
    streams: &mut FamilyStreams,
    mode: PairingMode,
    declared: &[Family],
    mut decisions_fn: F,
) -> Result<PairedOutput<O>>
where
    F: FnMut(Half, &mut DecisionSource<'_>, Option<&O>) -> Result<O>,
{
    let scope = PairScope::enter(streams);
    let (original, original_transcript) = {
        let mut src = DecisionSource {
            streams,
            declared,
            transcript: Transcript::default(),
        };
        let out = decisions_fn(Half::Original, &mut src, None)?;
        (out, src.transcript)
    };
    scope.restore(streams, |f| mode.is_paired(f))?;
    let (noisy, noisy_transcript) = {
        let mut src = DecisionSource {
            streams,
            declared,
            transcript: Transcript::default(),
        };
        let out = decisions_fn(Half::Noisy, &mut src, Some(&original))?;
        (out, src.transcript)
    };
    Ok(PairedOutput {
        original,
        noisy,
        original_transcript,
        noisy_transcript,
    })
}
