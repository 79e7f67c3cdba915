//! Volume rendering along one ray: a homogeneous medium against its closed
//! form, then a thin slab rendered with uniform and with coarse-to-fine
//! samples at equal budgets. When the coarse pass is too sparse to hit the
//! slab, the fine pass has nothing to refine and does worse than uniform.
//!
//! `cargo run --release --example volume_render`

use lasernv::geometry::Ray;
use lasernv::renderer::{composite_ray, fine_samples, midpoint_samples, stratified_samples};
use nalgebra::{Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SLAB: (f64, f64) = (4.0, 4.8);

fn slab_sigma(t: f64) -> f64 {
    if (SLAB.0..SLAB.1).contains(&t) { 8.0 } else { 0.0 }
}

/// Colour ramps with depth so that where the samples land shows in the result.
fn slab_rgb(t: f64) -> [f64; 3] {
    let s = ((t - SLAB.0) / (SLAB.1 - SLAB.0)).clamp(0.0, 1.0);
    [0.9 - 0.6 * s, 0.2 + 0.6 * s, 0.3]
}

fn render(depths: &[f64], ray: &Ray, bg: [f64; 3]) -> lasernv::renderer::RenderResult {
    let sigma: Vec<f64> = depths.iter().map(|&t| slab_sigma(t)).collect();
    let rgb: Vec<[f64; 3]> = depths.iter().map(|&t| slab_rgb(t)).collect();
    composite_ray(depths, &sigma, &rgb, ray.t_far, bg)
}

fn main() {
    let ray = Ray { origin: Point3::origin(), direction: Vector3::x(), t_near: 0.5, t_far: 10.5 };
    let bg = [0.1, 0.2, 0.9];

    println!("homogeneous medium, 512 midpoint samples:");
    let depths = midpoint_samples(&ray, 512);
    for sigma in [0.05, 0.5, 5.0] {
        let out = composite_ray(&depths, &vec![sigma; 512], &vec![[0.8, 0.3, 0.1]; 512], ray.t_far, bg);
        let trans = (-sigma * (ray.t_far - ray.t_near)).exp();
        let exact = 0.8 * (1.0 - trans) + bg[0] * trans;
        println!("  sigma {sigma:>4}: red {:.6} vs closed form {exact:.6}, sum w + T = {:.8}", out.color[0], out.weights.iter().sum::<f64>() + out.t_final);
    }

    let reference = render(&midpoint_samples(&ray, 20_000), &ray, bg);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    println!("thin slab at {:?} m, reference red {:.4}, depth {:.3} m:", SLAB, reference.color[0], reference.expected_depth);
    for n in [8, 16, 32, 64] {
        let (mut err_uniform, mut err_fine) = (0.0, 0.0);
        let (mut depth_uniform, mut depth_fine) = (0.0, 0.0);
        let trials = 200;
        for _ in 0..trials {
            let uniform = render(&stratified_samples(&ray, 2 * n, &mut rng), &ray, bg);
            let coarse_depths = stratified_samples(&ray, n, &mut rng);
            let coarse = render(&coarse_depths, &ray, bg);
            let fine = fine_samples(&coarse.weights, &coarse_depths, ray.t_near, ray.t_far, n, &mut rng);
            let fine = render(&fine, &ray, bg);
            err_uniform += (uniform.color[0] - reference.color[0]).abs();
            err_fine += (fine.color[0] - reference.color[0]).abs();
            depth_uniform += (uniform.expected_depth - reference.expected_depth).abs();
            depth_fine += (fine.expected_depth - reference.expected_depth).abs();
        }
        println!(
            "  {:>3} samples: red |error| uniform {:.4}, coarse+fine {:.4}; depth |error| uniform {:.3} m, coarse+fine {:.3} m",
            2 * n,
            err_uniform / trials as f64,
            err_fine / trials as f64,
            depth_uniform / trials as f64,
            depth_fine / trials as f64
        );
    }
}
