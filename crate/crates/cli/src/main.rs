fn main() {
    std::process::exit(motionssl_cli::run(std::env::args_os()));
}
