fn main() {
    std::process::exit(gta_core::cli::main_with(std::env::args_os()));
}
