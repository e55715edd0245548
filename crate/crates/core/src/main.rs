fn main() {
    if let Err(e) = infdist::cli::run_from_args(std::env::args_os()) {
        e.report();
        std::process::exit(e.exit_code());
    }
}
