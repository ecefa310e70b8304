fn main() {
    std::process::exit(procrop::cli::run());
}
