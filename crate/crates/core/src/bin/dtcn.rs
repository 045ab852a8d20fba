fn main() {
    std::process::exit(dtcn::cli::run(std::env::args_os()));
}
