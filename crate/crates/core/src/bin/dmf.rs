fn main() {
    std::process::exit(dmf::cli::run(std::env::args_os()));
}
