fn main() {
    std::process::exit(followbench::cli::run(std::env::args_os()));
}
