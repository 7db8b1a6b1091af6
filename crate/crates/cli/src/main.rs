fn main() {
    std::process::exit(dgc_cli::run_from(std::env::args_os()));
}
