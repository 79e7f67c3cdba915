//! A conditional set flow: sample a latent set, score it, and check that the
//! density ignores the order of set elements and of the conditioning tokens.
//!
//! `cargo run --release --example flow_density`

use lasernv::flow::{Direction, FlowConfig, SetFlow};
use lasernv::nn::{jitter, Builder};
use lasernv_tensor::{ParamTree, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> lasernv::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = ParamTree::new();
    let cfg = FlowConfig { dim: 8, model_dim: 32, heads: 4, layers: 4, ctx_dim: 16, direction: Direction::Inverted };
    let flow = SetFlow::new(&mut Builder::new(&mut params, &mut rng), "prior", cfg);
    // Fresh flows are the identity; perturb them to get a non-trivial density.
    jitter(&mut params, 0.05, &mut rng);
    let params: ParamTree<f64> = params.cast();
    let tape = Tape::inference(&params);

    let ctx = tape.constant(Tensor::from_fn(vec![12, 16], |_| StandardNormal.sample(&mut rng)));
    let (z, logprob) = flow.sample(&tape, ctx, 6, &mut rng)?;
    println!("sampled a set of {} latents of dim {}; log density {:.4}", z.dim(0), z.dim(1), logprob.item());

    let again = flow.logprob(z, ctx)?.item();
    let z_perm = z.index_select(vec![5, 3, 1, 0, 2, 4].into());
    let ctx_perm = ctx.index_select((0..12).rev().collect::<Vec<_>>().into());
    let permuted = flow.logprob(z_perm, ctx_perm)?.item();
    println!("rescored: {again:.10}; with both sets permuted: {permuted:.10}");

    let (base, _) = flow.apply(z, ctx)?;
    let (back, _) = flow.unapply(base, ctx)?;
    println!("base -> set -> base round trip error {:.2e}", back.value().max_abs_diff(&z.value()));
    Ok(())
}
