use tgpp::alloc_track::TrackingAllocator;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(tgpp_cli::run(&argv));
}
