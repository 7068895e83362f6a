fn main() {
    std::process::exit(noisy_gt::cli::run(std::env::args_os()));
}
