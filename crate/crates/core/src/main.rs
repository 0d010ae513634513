fn main() {
    std::process::exit(actcomp::cli::run(std::env::args_os()));
}
