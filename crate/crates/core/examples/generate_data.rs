//! Generates a MiniCity RGB-D dataset, writes it to disk and reads it back.
//!
//! `cargo run --release --example generate_data -- [out_dir] [scenes] [views] [size]`

use std::path::PathBuf;

use lasernv::data::{generate_dataset, read_dataset, write_dataset, ViewSpec};

fn main() -> lasernv::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "minicity".into()));
    let scenes = args.next().map_or(4, |s| s.parse().expect("scene count"));
    let views = args.next().map_or(6, |s| s.parse().expect("view count"));
    let size = args.next().map_or(32, |s| s.parse().expect("image size"));

    let data = generate_dataset(0, scenes, views, ViewSpec::square(size))?;
    write_dataset(&out, &data)?;
    let back = read_dataset(&out)?;
    assert_eq!(back, data, "round trip changed the dataset");

    for rec in &data.scenes {
        let v = &rec.views[0];
        let hits: Vec<f32> = v.depth.iter().copied().filter(|&d| (d as f64) < data.spec.t_far).collect();
        let near = hits.iter().copied().fold(f32::INFINITY, f32::min);
        println!(
            "{}: {} boxes, view 0 sees geometry in {:.0}% of pixels (nearest {:.2} m), camera at {:.2?}",
            rec.id,
            rec.scene.boxes.len(),
            100.0 * hits.len() as f64 / v.depth.len() as f64,
            near,
            v.camera.center().coords.as_slice()
        );
    }
    println!("wrote {} scenes x {views} views to {}", data.scenes.len(), out.display());
    Ok(())
}
