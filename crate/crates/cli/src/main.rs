fn main() {
    std::process::exit(phmn_cli::dispatch(std::env::args_os()));
}
