use regionlets::bench::{generate_instance, BenchConfig};
use regionlets::ppm::write_ppm;
use std::path::Path;

fn main() {
    let inst = generate_instance(&BenchConfig::default(), 12345);
    write_ppm(Path::new("/tmp/scene.ppm"), &inst.image).unwrap();
    println!("wrote /tmp/scene.ppm with {} shapes", inst.gt.len());
}
