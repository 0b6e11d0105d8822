//! Inspection artifacts: phrase-query attention maps and the value
//! distributions of the global and phrase cross-attention outputs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::amg::SignalSet;
use crate::config::ModelConfig;
use crate::encoders::Vocab;
use crate::error::{Error, Result};
use crate::geometry::NormBox;
use crate::image::Image;
use crate::model::{initial_noise, Mode, Model};
use crate::tensor::gradcheck::{grad_check, randomize_for_check, CheckReport};
use crate::tensor::{Tape, Tensor};

/// Head-averaged phrase-query attention over the prompt's tokens,
/// `l_phr x token_count`, written as CSV with one column per token.
pub fn dump_attention(model: &Model, prompt: &str, out: &Path) -> Result<Tensor> {
    let emb = model.text.encode(&model.store, prompt)?;
    if emb.token_count == 0 {
        return Err(Error::validation("the prompt has no tokens"));
    }
    let att = model.parser.phrase_attention(&model.store, &emb.t_emb, emb.token_count)?;
    let tokens: Vec<String> = Vocab::tokenize(prompt).into_iter().take(emb.token_count).collect();
    let mut w = csv::Writer::from_path(out)?;
    let mut header = vec!["query".to_string()];
    header.extend(tokens.iter().enumerate().map(|(j, t)| format!("{j}:{t}")));
    w.write_record(&header)?;
    for i in 0..att.rows() {
        let mut rec = vec![i.to_string()];
        rec.extend(att.row(i).iter().map(|v| format!("{v:.8}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(att)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub median: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[min, max]`; a constant input puts every
    /// value in the first bin.
    pub fn new(values: &[f64], bins: usize) -> Result<Self> {
        if values.is_empty() || bins == 0 {
            return Err(Error::validation("histogram needs values and bins"));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
        let n = sorted.len();
        let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
        let mut counts = vec![0; bins];
        let width = (max - min) / bins as f64;
        for &v in values {
            let b = if width > 0.0 { (((v - min) / width) as usize).min(bins - 1) } else { 0 };
            counts[b] += 1;
        }
        Ok(Histogram { min, max, median, counts })
    }

    pub fn edges(&self, bin: usize) -> (f64, f64) {
        let width = (self.max - self.min) / self.counts.len() as f64;
        (self.min + width * bin as f64, self.min + width * (bin + 1) as f64)
    }
}

pub const FEATURE_BINS: usize = 64;

/// Histograms of the layout block's global and phrase cross-attention
/// outputs for a batch of prompts at diffusion step `t`, in that order.
pub fn feature_distribution(model: &Model, prompts: &[&str], t: usize, seed: u64, out: &Path) -> Result<[Histogram; 2]> {
    let empty = SignalSet::default();
    let signals = vec![&empty; prompts.len()];
    let mut tape = Tape::inference();
    let ctx = model.context(&mut tape, prompts, &signals, Mode::RSA_ONLY)?;
    let n = model.image_len();
    let noise: Vec<f64> = (0..prompts.len() as u64).flat_map(|i| initial_noise(seed.wrapping_add(i), n)).collect();
    let x = tape.constant(Tensor::matrix(prompts.len(), n, noise)?);
    let f = model.denoise(&mut tape, x, &vec![t; prompts.len()], &ctx)?;
    let layout = &f.rsa[model.cfg.layout_index()];
    let v_phr = layout.v_phr.ok_or_else(|| Error::contract("layout block produced no phrase output"))?;
    let glob = Histogram::new(tape.value(layout.v_glob).data(), FEATURE_BINS)?;
    let phr = Histogram::new(tape.value(v_phr).data(), FEATURE_BINS)?;
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["tensor", "min", "max", "median", "bin", "lo", "hi", "count"])?;
    for (name, h) in [("v_glob", &glob), ("v_phr", &phr)] {
        for (b, c) in h.counts.iter().enumerate() {
            let (lo, hi) = h.edges(b);
            w.write_record([
                name.to_string(),
                format!("{:.8}", h.min),
                format!("{:.8}", h.max),
                format!("{:.8}", h.median),
                b.to_string(),
                format!("{lo:.8}"),
                format!("{hi:.8}"),
                c.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok([glob, phr])
}

/// Default step of the central differences in [`pipeline_grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Checks every parameter of a small full model (text encoder, parser,
/// layout adapters, signal encoders, controller, interaction layers and
/// backbone) against central differences. The batch mixes a structure plus
/// objects request, an objects plus boxes request and a text-only request;
/// parameters are first redrawn at generic values.
pub fn pipeline_grad_check(seed: u64, h: f64) -> Result<CheckReport> {
    let mut model = Model::new(ModelConfig::tiny(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<_> = model.store.ids().collect();
    randomize_for_check(&mut model.store, &all, &mut rng);
    let r = model.cfg.ref_size;
    let noise_image = |rng: &mut ChaCha8Rng| {
        Image::new(r, r, (0..r * r * 3).map(|_| rng.random_range(0.0..1.0)).collect()).expect("size")
    };
    let sets = [
        SignalSet { structure: Some(noise_image(&mut rng)), objects: vec![noise_image(&mut rng)], boxes: vec![] },
        SignalSet {
            structure: None,
            objects: vec![noise_image(&mut rng), noise_image(&mut rng)],
            boxes: vec![NormBox::new(0.1, 0.2, 0.5, 0.6)?, NormBox::new(0.55, 0.1, 0.9, 0.45)?],
        },
        SignalSet::default(),
    ];
    let prompts = ["a scene with 2 red circles", "1 blue square and 1 green triangle", "3 yellow circles"];
    let n = model.image_len();
    let x = Tensor::matrix(3, n, (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let probe = Tensor::matrix(3, n, (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let ts = [3, 9, 17];
    let Model { store, .. } = &mut model;
    let mut store = std::mem::take(store);
    let model = &model;
    let report = grad_check(
        |tape, st| {
            let m = Model { store: st.clone(), ..model.clone() };
            let sig: Vec<&SignalSet> = sets.iter().collect();
            let ctx = m.context(tape, &prompts, &sig, Mode::FULL)?;
            let xv = tape.constant(x.clone());
            let f = m.denoise(tape, xv, &ts, &ctx)?;
            let w = tape.constant(probe.clone());
            let p = tape.mul(f.eps, w)?;
            tape.sum(p)
        },
        &mut store,
        &all,
        h,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    #[test]
    fn attention_rows_are_distributions() {
        let m = Model::new(ModelConfig::tiny(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let att = dump_attention(&m, "a scene with 2 red circles and 1 blue square", &dir.path().join("a.csv")).unwrap();
        assert_eq!(att.shape(), &[m.cfg.l_phr, m.cfg.l_emb.min(10)]);
        for i in 0..att.rows() {
            assert!((att.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let one = dump_attention(&m, "circle", &dir.path().join("b.csv")).unwrap();
        assert!(one.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let text = std::fs::read_to_string(dir.path().join("b.csv")).unwrap();
        assert!(text.starts_with("query,0:circle\n"));
    }

    #[test]
    fn histogram_counts_cover_every_value() {
        let vals: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 - 50.0).collect();
        let h = Histogram::new(&vals, 64).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), 1000);
        assert_eq!((h.min, h.max), (-50.0, 50.0));
        let flat = Histogram::new(&[0.0; 30], 64).unwrap();
        assert_eq!(flat.counts[0], 30);
        assert_eq!(flat.counts.iter().filter(|&&c| c > 0).count(), 1);
    }

    #[test]
    fn zero_weights_give_single_bin_features() {
        let mut m = Model::new(ModelConfig::tiny(), 1).unwrap();
        for id in m.store.ids().collect::<Vec<_>>() {
            m.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let dir = tempfile::tempdir().unwrap();
        let [g, p] = feature_distribution(&m, &["one red circle", "two"], 5, 0, &dir.path().join("f.csv")).unwrap();
        for h in [g, p] {
            assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
            assert_eq!(h.counts.iter().sum::<usize>(), 2 * m.cfg.l_net() * m.cfg.d_net);
        }
    }
}
