fn main() {
    std::process::exit(caustic_recon::cli::main_with_args(std::env::args_os()));
}
