fn main() {
    std::process::exit(calltriage_server::cli::run(std::env::args_os()));
}
