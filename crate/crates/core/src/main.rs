fn main() {
    std::process::exit(ltsfs::cli::main());
}
