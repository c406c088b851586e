fn main() {
    std::process::exit(switched_contrastive::cli::run(std::env::args_os()));
}
