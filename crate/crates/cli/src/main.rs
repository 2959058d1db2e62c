fn main() {
    std::process::exit(qsft_cli::run(std::env::args_os()));
}
