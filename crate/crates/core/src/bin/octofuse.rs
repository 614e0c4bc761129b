fn main() {
    std::process::exit(octofuse::cli::run(std::env::args_os()));
}
