//! Counter-based streams: snapshot, replay, and the paired save/restore
//! protocol with one family left unpaired.

use switched_contrastive::pairing::{paired_forward, Family, FamilyStreams, PairingMode};
use switched_contrastive::rng::{streams, RandomSource, RngStream};

fn main() -> switched_contrastive::Result<()> {
    let mut s = RngStream::new(7, streams::MASK);
    let snap = s.save_state();
    let a: Vec<u64> = (0..3).map(|_| s.next_u64()).collect();
    s.restore_state(snap)?;
    let b: Vec<u64> = (0..3).map(|_| s.next_u64()).collect();
    println!("replay after restore matches: {}", a == b);

    let mode = PairingMode {
        dropout_masks: false,
        ..PairingMode::all_on()
    };
    let mut fs = FamilyStreams::new(7);
    let out = paired_forward(&mut fs, mode, &Family::ALL, |_, src, _| {
        let mask = src.stream(Family::MaskPositions)?.uniform();
        let drop = src.stream(Family::DropoutMasks)?.uniform();
        Ok((mask, drop))
    })?;
    println!("original half: mask {:.6} dropout {:.6}", out.original.0, out.original.1);
    println!("noisy half:    mask {:.6} dropout {:.6}", out.noisy.0, out.noisy.1);
    for f in Family::ALL {
        let (o, n) = (out.original_transcript.log(f), out.noisy_transcript.log(f));
        println!("{:<12} draws {} / {}  same: {}", f.name(), o.draws, n.draws, o == n);
    }
    Ok(())
}
