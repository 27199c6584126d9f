fn main() {
    std::process::exit(noisectl::run(std::env::args_os()));
}
