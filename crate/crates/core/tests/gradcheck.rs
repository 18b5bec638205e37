use qlrnn::cells::{Pooling, SkipVariant};
use qlrnn::network::{Arch, Mode, Model, ModelSpec, Readout, Task};
use qlrnn::training::gradient_check;
use qlrnn::Rng;

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

fn instance(arch: Arch, variant: SkipVariant, pooling: Pooling, seed: u64) -> (Model<f64>, Vec<usize>, usize) {
    let mut rng = Rng::derive(seed, &[7]);
    let mut spec = ModelSpec::new(arch, 6, 3, 1 + rng.below(4), 2);
    spec.skip_variant = variant;
    spec.pooling = pooling;
    spec.leap = 1 + rng.below(4);
    spec.flush_partial = rng.below(2) == 1;
    let len = 2 + rng.below(8);
    let tokens = (0..len).map(|_| rng.below(6)).collect();
    let model = Model::with_forget_bias(spec, seed, 0.5).unwrap();
    (model, tokens, rng.below(2))
}

#[test]
fn bptt_matches_finite_differences_everywhere() {
    let mut worst = 0.0f64;
    for arch in Arch::ALL {
        for variant in [SkipVariant::Summary, SkipVariant::Carry] {
            for pooling in [Pooling::Mean, Pooling::Max, Pooling::MeanMax] {
                for seed in 0..5 {
                    let (model, tokens, label) = instance(arch, variant, pooling, seed);
                    let r = gradient_check(&model, &tokens, Some(label), Mode::Eval, 0, STEP).unwrap();
                    assert!(
                        r.max_rel_err < TOL,
                        "{arch} {variant} {pooling} seed {seed}: {r:?}"
                    );
                    worst = worst.max(r.max_rel_err);
                }
            }
        }
    }
    println!("worst relative error {worst:.3e}");
}

#[test]
fn mean_readout_and_language_modelling() {
    for arch in Arch::ALL {
        for seed in 0..3 {
            let (mut model, tokens, label) = instance(arch, SkipVariant::Summary, Pooling::Mean, seed);
            model.spec.readout = Readout::Mean;
            let r = gradient_check(&model, &tokens, Some(label), Mode::Eval, 0, STEP).unwrap();
            assert!(r.max_rel_err < TOL, "{arch} mean readout: {r:?}");
            if arch == Arch::BiLstm {
                continue;
            }
            let mut spec = model.spec.clone();
            spec.task = Task::Lm;
            spec.readout = Readout::Last;
            let lm = Model::new(spec, seed).unwrap();
            let r = gradient_check(&lm, &tokens, None, Mode::Eval, 0, STEP).unwrap();
            assert!(r.max_rel_err < TOL, "{arch} lm: {r:?}");
        }
    }
}

#[test]
fn dropout_in_train_mode() {
    for arch in Arch::ALL {
        let (mut model, tokens, label) = instance(arch, SkipVariant::Summary, Pooling::MeanMax, 11);
        model.spec.dropout = 0.3;
        let r = gradient_check(&model, &tokens, Some(label), Mode::Train, 99, STEP).unwrap();
        assert!(r.max_rel_err < TOL, "{arch} dropout: {r:?}");
    }
}
