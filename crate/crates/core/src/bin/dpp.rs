fn main() {
    std::process::exit(dpp_core::harness::cli::cli_run(std::env::args_os()));
}
