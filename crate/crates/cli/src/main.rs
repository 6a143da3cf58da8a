fn main() {
    std::process::exit(decoreg_cli::run(std::env::args_os()));
}
