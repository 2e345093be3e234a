fn main() {
    std::process::exit(anomret_cli::run(std::env::args_os()));
}
