fn main() {
    std::process::exit(dapt_cli::run(std::env::args_os()));
}
