fn main() {
    std::process::exit(ldar_lab::cli::run(std::env::args_os()));
}
