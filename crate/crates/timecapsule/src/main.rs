fn main() {
    std::process::exit(timecapsule::run());
}
