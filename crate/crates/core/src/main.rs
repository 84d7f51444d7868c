fn main() {
    std::process::exit(infmix::cli::main_with(std::env::args_os()));
}
