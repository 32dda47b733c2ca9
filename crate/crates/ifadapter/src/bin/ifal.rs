fn main() {
    std::process::exit(ifadapter::cli::run());
}
