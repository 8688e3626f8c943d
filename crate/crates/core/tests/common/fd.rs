//! Central finite-difference checks for every differentiable primitive and
//! for the combined loss through the whole network.
//!
//! Each primitive case builds a fresh tape, projects the op's output onto a
//! fixed random field (so every output coordinate influences the scalar), and
//! compares backward-pass gradients against (f(x+e) - f(x-e)) / 2e at
//! randomly chosen coordinates. Inputs for kinked ops (relu, abs) are sampled
//! away from zero, so the difference window never straddles the kink.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgmnet_core::data::{synth_dataset, transition_mask, SynthConfig};
use sgmnet_core::losses::{total_loss, LossWeights, TotalLossInputs};
use sgmnet_core::model::{forward, ModelConfig};
use sgmnet_core::nn::{collect_grads, Binder, ParamStore};
use sgmnet_core::tape::{Tape, ValueId};
use sgmnet_core::tensor::{Shape4, Tensor4, UpsampleMode};

pub const INSTANCES: usize = 20;
const PRIMITIVE_EPS: f64 = 1e-4;
const COORDS_PER_INPUT: usize = 3;

/// Relative agreement within 1e-4, with an absolute floor for gradients near
/// zero where relative error is meaningless.
pub fn agree(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= 1e-4 * analytic.abs().max(numeric.abs()) || diff <= 1e-7
}

fn case_rng(label: &str, instance: usize) -> ChaCha8Rng {
    let h = label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    });
    ChaCha8Rng::seed_from_u64(h ^ instance as u64)
}

fn sh(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
    Shape4::new(n, c, h, w)
}

fn uniform(shape: Shape4, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor4 {
    Tensor4::from_vec(
        shape,
        (0..shape.numel())
            .map(|_| rng.random_range(lo..hi))
            .collect(),
    )
    .unwrap()
}

/// Magnitudes in [0.1, 1] with random sign: at least 0.1 from the kink, three
/// orders above the probe step.
fn kink_free(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4 {
    Tensor4::from_vec(
        shape,
        (0..shape.numel())
            .map(|_| {
                let m = rng.random_range(0.1..1.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    )
    .unwrap()
}

/// Check one op instance: `build` must recreate the same graph for any input
/// values (constants captured, structure fixed).
fn fd_case(
    name: &str,
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor4],
    build: &dyn Fn(&mut Tape, &[ValueId]) -> ValueId,
) {
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = build(&mut tape, &ids);
    let field = uniform(tape.shape(y), rng, -1.0, 1.0);
    let fid = tape.leaf(field.clone());
    let proj = tape.mul(y, fid).unwrap();
    let loss = tape.sum(proj);
    let grads = tape.backward(loss).unwrap();

    let eval = |xs: &[Tensor4]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = build(&mut tape, &ids);
        let fid = tape.leaf(field.clone());
        let proj = tape.mul(y, fid).unwrap();
        let loss = tape.sum(proj);
        tape.value(loss).scalar().unwrap()
    };

    for (k, input) in inputs.iter().enumerate() {
        let g = grads.expect(ids[k], name).unwrap();
        for _ in 0..COORDS_PER_INPUT {
            let c = rng.random_range(0..input.numel());
            let analytic = g.data()[c];
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[c] += PRIMITIVE_EPS;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[c] -= PRIMITIVE_EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * PRIMITIVE_EPS);
            assert!(
                agree(analytic, numeric),
                "{name}: input {k} coord {c}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }
}

pub fn conv() {
    for inst in 0..INSTANCES {
        let mut rng = case_rng("conv", inst);
        let k = if rng.random_bool(0.5) { 1 } else { 3 };
        let stride = if rng.random_bool(0.5) { 1 } else { 2 };
        let (n, ci, co) = (
            rng.random_range(1..=2),
            rng.random_range(1..=3),
            rng.random_range(1..=3),
        );
        let x = uniform(
            sh(n, ci, rng.random_range(4..=7), rng.random_range(4..=7)),
            &mut rng,
            -1.0,
            1.0,
        );
        let w = uniform(sh(co, ci, k, k), &mut rng, -1.0, 1.0);
        let b = uniform(sh(1, co, 1, 1), &mut rng, -1.0, 1.0);
        let pad = k / 2;
        fd_case("conv2d", &mut rng, &[x, w, b], &move |t, ids| {
            t.conv2d(ids[0], ids[1], ids[2], stride, pad).unwrap()
        });
    }
}

pub fn upsample() {
    for inst in 0..INSTANCES {
        let mut rng = case_rng("upsample", inst);
        let factor = rng.random_range(2..=3);
        let x = uniform(
            sh(
                rng.random_range(1..=2),
                rng.random_range(1..=3),
                rng.random_range(2..=5),
                rng.random_range(2..=5),
            ),
            &mut rng,
            -1.0,
            1.0,
        );
        for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
            fd_case(
                "upsample",
                &mut rng,
                std::slice::from_ref(&x),
                &move |t, ids| t.upsample(ids[0], factor, mode).unwrap(),
            );
        }
    }
}

pub fn pooling() {
    for inst in 0..INSTANCES {
        let mut rng = case_rng("pooling", inst);
        let k = rng.random_range(2..=3);
        let x = uniform(
            sh(
                rng.random_range(1..=2),
                rng.random_range(1..=3),
                k * rng.random_range(1..=2),
                k * rng.random_range(1..=2),
            ),
            &mut rng,
            -1.0,
            1.0,
        );
        fd_case(
            "avg_pool",
            &mut rng,
            std::slice::from_ref(&x),
            &move |t, ids| t.avg_pool(ids[0], k).unwrap(),
        );
        fd_case("global_avg_pool", &mut rng, &[x], &|t, ids| {
            t.global_avg_pool(ids[0])
        });
    }
}

pub fn pointwise() {
    for inst in 0..INSTANCES {
        let mut rng = case_rng("pointwise", inst);
        let shape = sh(
            rng.random_range(1..=2),
            rng.random_range(1..=3),
            rng.random_range(2..=6),
            rng.random_range(2..=6),
        );
        let safe = kink_free(shape, &mut rng);
        fd_case("relu", &mut rng, std::slice::from_ref(&safe), &|t, ids| {
            t.relu(ids[0])
        });
        fd_case("abs", &mut rng, &[safe], &|t, ids| t.abs(ids[0]));
        let smooth = uniform(shape, &mut rng, -2.0, 2.0);
        fd_case(
            "sigmoid",
            &mut rng,
            std::slice::from_ref(&smooth),
            &|t, ids| t.sigmoid(ids[0]),
        );
        let mul = rng.random_range(-2.0..2.0);
        let add = rng.random_range(-1.0..1.0);
        fd_case("affine", &mut rng, &[smooth], &move |t, ids| {
            t.affine(ids[0], mul, add)
        });
    }
}

pub fn softmax() {
    for inst in 0..INSTANCES {
        let mut rng = case_rng("softmax", inst);
        let x = uniform(
            sh(
                rng.random_range(1..=2),
                rng.random_range(2..=4),
                rng.random_range(2..=5),
                rng.random_range(2..=5),
            ),
            &mut rng,
            -2.0,
            2.0,
        );
        fd_case("channel_softmax", &mut rng, &[x], &|t, ids| {
            t.channel_softmax(ids[0]).unwrap()
        });
    }
}

pub fn channel_wiring() {
    for inst in 0..INSTANCES {
        let mut rng = case_rng("channel_wiring", inst);
        let (n, h, w) = (
            rng.random_range(1..=2),
            rng.random_range(2..=5),
            rng.random_range(2..=5),
        );
        let parts: Vec<Tensor4> = (0..3)
            .map(|_| uniform(sh(n, rng.random_range(1..=2), h, w), &mut rng, -1.0, 1.0))
            .collect();
        fd_case("concat_channels", &mut rng, &parts, &|t, ids| {
            t.concat_channels(ids).unwrap()
        });
        // Same value concatenated with itself: gradients must accumulate.
        fd_case("replicate3", &mut rng, &[parts[0].clone()], &|t, ids| {
            t.replicate3(ids[0]).unwrap()
        });
        let wide = uniform(sh(n, 5, h, w), &mut rng, -1.0, 1.0);
        let start = rng.random_range(0..4usize);
        let len = rng.random_range(1..=5 - start);
        fd_case("slice_channels", &mut rng, &[wide], &move |t, ids| {
            t.slice_channels(ids[0], start, len).unwrap()
        });
    }
}

pub fn arithmetic() {
    for inst in 0..INSTANCES {
        let mut rng = case_rng("arithmetic", inst);
        let shape = sh(
            rng.random_range(1..=2),
            rng.random_range(1..=3),
            rng.random_range(2..=5),
            rng.random_range(2..=5),
        );
        let a = uniform(shape, &mut rng, -1.0, 1.0);
        let b = uniform(shape, &mut rng, -1.0, 1.0);
        fd_case("add", &mut rng, &[a.clone(), b.clone()], &|t, ids| {
            t.add(ids[0], ids[1]).unwrap()
        });
        fd_case("sub", &mut rng, &[a.clone(), b.clone()], &|t, ids| {
            t.sub(ids[0], ids[1]).unwrap()
        });
        fd_case("mul", &mut rng, &[a.clone(), b], &|t, ids| {
            t.mul(ids[0], ids[1]).unwrap()
        });
        let gate = uniform(sh(shape.n, shape.c, 1, 1), &mut rng, -1.0, 1.0);
        fd_case("mul_channel_gate", &mut rng, &[a, gate], &|t, ids| {
            t.mul_channel_gate(ids[0], ids[1]).unwrap()
        });
    }
}

pub fn reductions() {
    for inst in 0..INSTANCES {
        let mut rng = case_rng("reductions", inst);
        let x = uniform(
            sh(
                rng.random_range(1..=2),
                rng.random_range(1..=3),
                rng.random_range(2..=5),
                rng.random_range(2..=5),
            ),
            &mut rng,
            -1.0,
            1.0,
        );
        fd_case("sum", &mut rng, std::slice::from_ref(&x), &|t, ids| {
            t.sum(ids[0])
        });
        fd_case("mean", &mut rng, &[x], &|t, ids| t.mean(ids[0]));
    }
}

/// Every primitive suite, for callers that want to run the lot.
pub fn all_primitives() {
    conv();
    upsample();
    pooling();
    pointwise();
    softmax();
    channel_wiring();
    arithmetic();
    reductions();
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder_channels: [4, 4, 8, 8, 8],
        fpm_channels: 4,
        input_size: 32,
        ..ModelConfig::default()
    }
}

/// Probe the combined loss through the full network at `min_coords` random
/// parameter coordinates. The probe step is eps=1e-5; difference noise sits
/// around 1e-10, well under the acceptance band.
pub fn end_to_end_loss(model: &ModelConfig, store_seed: u64, min_coords: usize) {
    let samples = synth_dataset(&SynthConfig {
        seed: 404,
        count: 2,
        size: 32,
        ..SynthConfig::default()
    })
    .unwrap();
    let image =
        Tensor4::stack_batch(&[samples[0].image.clone(), samples[1].image.clone()]).unwrap();
    let alpha_g =
        Tensor4::stack_batch(&[samples[0].alpha.clone(), samples[1].alpha.clone()]).unwrap();
    let fg = Tensor4::stack_batch(&[
        samples[0].fg.clone().unwrap(),
        samples[1].fg.clone().unwrap(),
    ])
    .unwrap();
    let bg = Tensor4::stack_batch(&[
        samples[0].bg.clone().unwrap(),
        samples[1].bg.clone().unwrap(),
    ])
    .unwrap();
    let m_d = transition_mask(&alpha_g, 3).unwrap();
    let weights = LossWeights::default();

    let mut store = ParamStore::new(store_seed);
    let analytic = {
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut store, &mut tape);
        let x = b.tape().leaf(image.clone());
        let out = forward(&mut b, x, model).unwrap();
        let bindings = b.into_bindings();
        let (l, _) = total_loss(
            &mut tape,
            &TotalLossInputs {
                s_po: out.s_po,
                d_p: out.d_p,
                alpha_p: out.alpha_p,
                alpha_g: &alpha_g,
                m_d: &m_d,
                image: &image,
                fg: Some(&fg),
                bg: Some(&bg),
            },
            &weights,
        )
        .unwrap();
        let grads = tape.backward(l).unwrap();
        collect_grads(&bindings, &grads).unwrap()
    };

    let eval = |store: &mut ParamStore| -> f64 {
        let mut tape = Tape::new();
        let mut b = Binder::new(store, &mut tape);
        let x = b.tape().leaf(image.clone());
        let out = forward(&mut b, x, model).unwrap();
        let (l, _) = total_loss(
            &mut tape,
            &TotalLossInputs {
                s_po: out.s_po,
                d_p: out.d_p,
                alpha_p: out.alpha_p,
                alpha_g: &alpha_g,
                m_d: &m_d,
                image: &image,
                fg: Some(&fg),
                bg: Some(&bg),
            },
            &weights,
        )
        .unwrap();
        tape.value(l).scalar().unwrap()
    };

    let eps = 1e-5;
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(store_seed ^ 0xC0FF);
    for probe in 0..min_coords {
        let name = &names[rng.random_range(0..names.len())];
        let original = store.get(name).unwrap().clone();
        let c = rng.random_range(0..original.numel());
        let a = analytic.get(name).unwrap().data()[c];

        let mut plus = original.clone();
        plus.data_mut()[c] += eps;
        store.set(name, plus).unwrap();
        let lp = eval(&mut store);
        let mut minus = original.clone();
        minus.data_mut()[c] -= eps;
        store.set(name, minus).unwrap();
        let lm = eval(&mut store);
        store.set(name, original).unwrap();

        let numeric = (lp - lm) / (2.0 * eps);
        assert!(
            agree(a, numeric),
            "probe {probe}: {name}[{c}]: analytic {a} vs numeric {numeric}"
        );
    }
}

/// End-to-end checks on the default wiring plus the variant that feeds the
/// deepest semantic feature into the detail decoder.
pub fn end_to_end_all_variants(min_coords: usize) {
    end_to_end_loss(&tiny_model(), 0xE2E0, min_coords);
    let with_feed = ModelConfig {
        feed_sp_to_detail: true,
        ..tiny_model()
    };
    end_to_end_loss(&with_feed, 0xE2E1, 4.max(min_coords / 5));
}
