fn main() {
    std::process::exit(berry_meter::cli::main_with(std::env::args_os()));
}
