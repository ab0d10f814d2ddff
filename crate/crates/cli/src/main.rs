fn main() {
    std::process::exit(patchtrad_cli::run_cli(std::env::args_os()));
}
