fn main() {
    std::process::exit(protogap_core::cli::run_command(std::env::args_os()));
}
