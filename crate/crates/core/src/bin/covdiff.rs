fn main() {
    std::process::exit(covdiff::cli::run_from_args(std::env::args_os()));
}
