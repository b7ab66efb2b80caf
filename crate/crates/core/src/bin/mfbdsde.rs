fn main() {
    std::process::exit(mfbdsde::cli::main_with_args(std::env::args_os()));
}
