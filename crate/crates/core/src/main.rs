fn main() {
    std::process::exit(irg_core::cli::run(std::env::args_os()));
}
