fn main() {
    std::process::exit(lymphomil::cli::run(std::env::args_os()));
}
