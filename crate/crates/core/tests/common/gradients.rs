use dcl_core::losses::{adv_discriminator, adv_generator, loss_dc, loss_idt, sample_all_layers, GanObjective, LocationPairSample, PairSampling};
use dcl_core::nn::{build_models, ModelConfig, ModelSet};
use dcl_core::seed;
use dcl_core::train::tapped_extents;
use dcl_tensor::{Graph, Tensor};
use rand::Rng;

const H: f64 = 1e-5;
const ALPHA: f64 = 1.5;
const BETA: f64 = 1.0;
const TAU: f64 = 0.07;
const LOSSES: [&str; 5] = ["adv_d", "adv_g", "loss_dc", "loss_idt", "loss_total"];

struct Fixture {
    models: ModelSet<f64>,
    synth: Tensor<f64>,
    real: Tensor<f64>,
    samples: Vec<LocationPairSample>,
}

#[derive(Clone, Copy, PartialEq)]
enum Group {
    Encoder,
    Decoder,
    Discriminator,
    Head(usize),
}

fn groups(m: &ModelSet<f64>) -> Vec<Group> {
    let mut g = vec![Group::Encoder, Group::Decoder, Group::Discriminator];
    g.extend((0..m.heads.len()).map(Group::Head));
    g
}

fn tensor_mut(m: &mut ModelSet<f64>, g: Group, t: usize) -> &mut Tensor<f64> {
    let set = match g {
        Group::Encoder => &mut m.encoder,
        Group::Decoder => &mut m.decoder,
        Group::Discriminator => &mut m.discriminator,
        Group::Head(i) => &mut m.heads[i],
    };
    &mut set.tensors_mut()[t]
}

fn tensor_count(m: &ModelSet<f64>, g: Group) -> usize {
    match g {
        Group::Encoder => m.encoder.len(),
        Group::Decoder => m.decoder.len(),
        Group::Discriminator => m.discriminator.len(),
        Group::Head(i) => m.heads[i].len(),
    }
}

fn random_batch(rng: &mut impl Rng, n: usize, res: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n, 1, res, res], |_| rng.random_range(-0.9..0.9))
}

/// All five losses; with `grads`, also the analytic gradient of each loss
/// over every parameter, grouped like [`groups`].
fn evaluate(fx: &Fixture, grads: bool) -> ([f64; 5], Option<Vec<Vec<Vec<Tensor<f64>>>>>) {
    let g = Graph::<f64>::new();
    let b = fx.models.bind(&g, true, true);
    let (fake, feats_s) = b.synthesize(g.constant(fx.synth.clone()), None).unwrap();
    let real = g.constant(fx.real.clone());
    let adv_d = adv_discriminator(b.discriminate(real), b.discriminate(fake.detach()), GanObjective::Logistic);

    let adv_g = adv_generator(b.discriminate(fake), GanObjective::Logistic);
    let feats_f = b.features(fake);
    let dc = loss_dc(&b, &feats_s, &feats_f, &fx.samples, TAU).unwrap();
    let (out_r, _) = b.synthesize(real, None).unwrap();
    let idt = loss_idt(out_r, real);
    let total = adv_g.add(dc.scale(ALPHA)).add(idt.scale(BETA));
    let losses = [adv_d, adv_g, dc, idt, total];
    let values = losses.map(|l| l.item());
    if !grads {
        return (values, None);
    }
    let mut all = Vec::new();
    for l in losses {
        let gr = g.backward(l);
        let mut per_group = Vec::new();
        for grp in groups(&fx.models) {
            let vars = match grp {
                Group::Encoder => &b.encoder,
                Group::Decoder => &b.decoder,
                Group::Discriminator => &b.discriminator,
                Group::Head(i) => &b.heads[i],
            };
            per_group.push(vars.iter().map(|v| gr.get_or_zeros(*v)).collect());
        }
        all.push(per_group);
    }
    (values, Some(all))
}

pub fn a1() -> Result<String, String> {
    let mut cfg = ModelConfig::new(8, 4, 2);
    cfg.projection_dim = 16;
    let mut models = build_models::<f64>(&cfg, 7).map_err(|e| e.to_string())?;
    let mut rng = seed::rng(11);
    // zero biases leave input-raster projections degenerate
    for grp in groups(&models) {
        for t in 0..tensor_count(&models, grp) {
            let tensor = tensor_mut(&mut models, grp, t);
            if tensor.data().iter().all(|&x| x == 0.0) {
                tensor.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.1..0.1));
            }
        }
    }
    let budget = PairSampling {
        anchors: 4,
        partners: 3,
        local_radius: 1,
    };
    let samples = sample_all_layers(&tapped_extents(&cfg), 2, &budget, &mut rng).map_err(|e| e.to_string())?;
    let mut fx = Fixture {
        models,
        synth: random_batch(&mut rng, 2, 8),
        real: random_batch(&mut rng, 2, 8),
        samples,
    };
    let (_, analytic) = evaluate(&fx, true);
    let analytic = analytic.unwrap();

    // [checked, agreeing] per loss
    let mut tally = [[0usize; 2]; 5];
    for (gi, grp) in groups(&fx.models).into_iter().enumerate() {
        // the discriminator objective moves only the discriminator, the
        // generator objectives only the generator side
        let relevant: &[usize] = if grp == Group::Discriminator { &[0] } else { &[1, 2, 3, 4] };
        for t in 0..tensor_count(&fx.models, grp) {
            let numel = tensor_mut(&mut fx.models, grp, t).numel();
            for i in 0..numel {
                let orig = tensor_mut(&mut fx.models, grp, t).data()[i];
                tensor_mut(&mut fx.models, grp, t).data_mut()[i] = orig + H;
                let (plus, _) = evaluate(&fx, false);
                tensor_mut(&mut fx.models, grp, t).data_mut()[i] = orig - H;
                let (minus, _) = evaluate(&fx, false);
                tensor_mut(&mut fx.models, grp, t).data_mut()[i] = orig;
                for &l in relevant {
                    let a = analytic[l][gi][t].data()[i];
                    if a.abs() <= 1e-8 {
                        continue;
                    }
                    let numeric = (plus[l] - minus[l]) / (2.0 * H);
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
                    tally[l][0] += 1;
                    if rel < 1e-4 {
                        tally[l][1] += 1;
                    }
                }
            }
        }
    }
    let mut parts = Vec::new();
    let mut ok = true;
    for l in 0..5 {
        let [n, good] = tally[l];
        let frac = good as f64 / n.max(1) as f64;
        ok &= n > 0 && frac >= 0.99;
        parts.push(format!("{} {good}/{n} ({:.2}%)", LOSSES[l], 100.0 * frac));
    }
    let detail = parts.join(", ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}
