fn main() {
    std::process::exit(eecnn::cli::cli_dispatch(std::env::args().skip(1)));
}
