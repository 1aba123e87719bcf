use super::config::StageConfig;
use super::prediction::{PredictionSet, TapedPrediction};
use crate::autodiff::{attention, Bound, ParamStore, Tape, Tensor, Var};
use crate::dataio::Raster;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

const LN_EPS: f64 = 1e-5;

/// Prefix of parameters trained at the lower learning rate.
pub const STEM_PREFIX: &str = "stem.";

/// Fixed 2-D sinusoidal encoding, `rows·cols × dim`.
///
/// The first half of each row encodes the token row, the second half the
/// token column, each as interleaved `sin`/`cos` pairs.
pub fn positional_encoding(rows: usize, cols: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; rows * cols * dim];
    for r in 0..rows {
        for c in 0..cols {
            let base = (r * cols + c) * dim;
            for (offset, pos) in [(0, r as f64), (half, c as f64)] {
                for i in 0..half / 2 {
                    let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                    out[base + offset + 2 * i] = (pos * freq).sin();
                    out[base + offset + 2 * i + 1] = (pos * freq).cos();
                }
            }
        }
    }
    Tensor::from_parts(vec![rows * cols, dim], out)
}

/// Splits a raster into non-overlapping patches, one row per token.
pub fn patchify(raster: &Raster, cfg: &StageConfig) -> Result<Tensor> {
    let (h, w) = cfg.input_size;
    if raster.height() != h || raster.width() != w {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            lhs: vec![h, w],
            rhs: vec![raster.height(), raster.width()],
        });
    }
    let (gh, gw) = cfg.token_grid;
    let (ph, pw) = cfg.patch_size();
    let mut out = Vec::with_capacity(h * w);
    for tr in 0..gh {
        for tc in 0..gw {
            for r in 0..ph {
                for c in 0..pw {
                    out.push(raster.get(tr * ph + r, tc * pw + c));
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, ph * pw], out)
}

/// Transformer set predictor: patch stem, encoder, query decoder, and class
/// and geometry heads.
#[derive(Clone, Debug, PartialEq)]
pub struct SetPredictor {
    pub cfg: StageConfig,
    pub params: ParamStore,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, &[fan_in, fan_out], b)
}

struct Init<'a> {
    rng: ChaCha8Rng,
    store: &'a mut ParamStore,
}

impl Init<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let w = xavier(&mut self.rng, fan_in, fan_out);
        self.store.insert(format!("{name}.w"), w);
        self.store
            .insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }

    fn norm(&mut self, name: &str, dim: usize) {
        self.store
            .insert(format!("{name}.g"), Tensor::full(&[dim], 1.0));
        self.store
            .insert(format!("{name}.b"), Tensor::zeros(&[dim]));
    }

    fn attention(&mut self, name: &str, d: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{p}"), d, d);
        }
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize) {
        self.linear(&format!("{name}.fc1"), d, hidden);
        self.linear(&format!("{name}.fc2"), hidden, d);
    }
}

impl SetPredictor {
    pub fn new(cfg: StageConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let d = cfg.embed_dim;
        let (ph, pw) = cfg.patch_size();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: &mut store,
        };
        init.linear("stem.patch", ph * pw, d);
        for l in 0..cfg.encoder_layers {
            let p = format!("enc.{l}");
            init.norm(&format!("{p}.ln1"), d);
            init.attention(&format!("{p}.attn"), d);
            init.norm(&format!("{p}.ln2"), d);
            init.ffn(&format!("{p}.ffn"), d, cfg.ffn_dim);
        }
        let queries = uniform(&mut init.rng, &[cfg.num_queries, d], 1.0);
        init.store.insert("query", queries);
        for l in 0..cfg.decoder_layers {
            let p = format!("dec.{l}");
            init.norm(&format!("{p}.ln1"), d);
            init.attention(&format!("{p}.self"), d);
            init.norm(&format!("{p}.ln2"), d);
            init.attention(&format!("{p}.cross"), d);
            init.norm(&format!("{p}.ln3"), d);
            init.ffn(&format!("{p}.ffn"), d, cfg.ffn_dim);
        }
        init.norm("dec.out", d);
        init.linear("head.cls", d, cfg.num_classes);
        init.linear("head.geo1", d, d);
        init.linear("head.geo2", d, cfg.geometry_dim);
        Ok(Self { cfg, params: store })
    }

    /// Rebuilds a predictor around stored weights, checking every expected
    /// parameter is present with the right shape.
    pub fn from_params(cfg: StageConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(cfg.clone(), 0)?;
        if !reference.params.same_layout(&params) {
            return Err(Error::Model(
                "parameter layout does not match the stage config".into(),
            ));
        }
        Ok(Self { cfg, params })
    }

    /// Draws fresh class-head weights, keeping everything else.
    pub fn reset_class_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, c) = (self.cfg.embed_dim, self.cfg.num_classes);
        self.params.insert("head.cls.w", xavier(&mut rng, d, c));
        self.params.insert("head.cls.b", Tensor::zeros(&[c]));
    }

    /// Writes weights with the stage config and `extra` as JSON metadata.
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "config": self.cfg, "extra": extra });
        self.params.save(path, &meta.to_string())
    }

    /// Inverse of [`SetPredictor::save`]; returns the stored `extra` value.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (params, meta) = ParamStore::load(path)?;
        let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
        let mut meta: serde_json::Value =
            serde_json::from_str(&meta).map_err(|e| bad(e.to_string()))?;
        let cfg: StageConfig = serde_json::from_value(meta["config"].take())
            .map_err(|e| bad(format!("stage config: {e}")))?;
        Ok((Self::from_params(cfg, params)?, meta["extra"].take()))
    }

    /// Patch embedding plus positional encoding, followed by the encoder.
    pub fn encode_scene(&self, tape: &mut Tape, p: &Bound, raster: &Raster) -> Result<Var> {
        let tokens = patchify(raster, &self.cfg)?;
        let tokens = tape.constant(tokens);
        let (gh, gw) = self.cfg.token_grid;
        let pe = tape.constant(positional_encoding(gh, gw, self.cfg.embed_dim));
        let x = linear(tape, p, "stem.patch", tokens)?;
        let mut x = tape.add(x, pe)?;
        for l in 0..self.cfg.encoder_layers {
            let pre = format!("enc.{l}");
            let h = norm(tape, p, &format!("{pre}.ln1"), x)?;
            let a = mha(tape, p, &format!("{pre}.attn"), h, h, self.cfg.heads)?;
            x = tape.add(x, a)?;
            let h = norm(tape, p, &format!("{pre}.ln2"), x)?;
            let f = ffn(tape, p, &format!("{pre}.ffn"), h)?;
            x = tape.add(x, f)?;
        }
        Ok(x)
    }

    /// Learned queries attend to each other and to `memory`; heads map each
    /// query to a class distribution and sigmoid geometry.
    pub fn decode_set(&self, tape: &mut Tape, p: &Bound, memory: Var) -> Result<TapedPrediction> {
        let mut q = p.get("query");
        for l in 0..self.cfg.decoder_layers {
            let pre = format!("dec.{l}");
            let h = norm(tape, p, &format!("{pre}.ln1"), q)?;
            let a = mha(tape, p, &format!("{pre}.self"), h, h, self.cfg.heads)?;
            q = tape.add(q, a)?;
            let h = norm(tape, p, &format!("{pre}.ln2"), q)?;
            let a = mha(tape, p, &format!("{pre}.cross"), h, memory, self.cfg.heads)?;
            q = tape.add(q, a)?;
            let h = norm(tape, p, &format!("{pre}.ln3"), q)?;
            let f = ffn(tape, p, &format!("{pre}.ffn"), h)?;
            q = tape.add(q, f)?;
        }
        let q = norm(tape, p, "dec.out", q)?;
        let logits = linear(tape, p, "head.cls", q)?;
        let class_probs = tape.softmax(logits, 1)?;
        let g = linear(tape, p, "head.geo1", q)?;
        let g = tape.relu(g);
        let g = linear(tape, p, "head.geo2", g)?;
        let geometry = tape.sigmoid(g);
        Ok(TapedPrediction {
            class_probs,
            geometry,
        })
    }

    /// Full forward pass with parameters already bound to `tape`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, raster: &Raster) -> Result<TapedPrediction> {
        let raster = self.fit_input(raster);
        let memory = self.encode_scene(tape, p, &raster)?;
        self.decode_set(tape, p, memory)
    }

    /// Inference without gradients.
    pub fn predict(&self, raster: &Raster) -> Result<PredictionSet> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, raster)?;
        Ok(out.detach(&tape))
    }

    fn fit_input(&self, raster: &Raster) -> Raster {
        let (h, w) = self.cfg.input_size;
        raster.resized(h, w)
    }
}

fn linear(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.get(&format!("{name}.w")))?;
    tape.add_row(y, p.get(&format!("{name}.b")))
}

fn norm(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = tape.layer_norm(x, LN_EPS);
    let y = tape.mul_row(y, p.get(&format!("{name}.g")))?;
    tape.add_row(y, p.get(&format!("{name}.b")))
}

fn ffn(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = linear(tape, p, &format!("{name}.fc1"), x)?;
    let h = tape.relu(h);
    linear(tape, p, &format!("{name}.fc2"), h)
}

/// Multi-head attention of `x` over `ctx`.
fn mha(tape: &mut Tape, p: &Bound, name: &str, x: Var, ctx: Var, heads: usize) -> Result<Var> {
    let q = linear(tape, p, &format!("{name}.q"), x)?;
    let k = linear(tape, p, &format!("{name}.k"), ctx)?;
    let v = linear(tape, p, &format!("{name}.v"), ctx)?;
    let out = if heads == 1 {
        attention(tape, q, k, v)?
    } else {
        let dh = tape.shape(q)[1] / heads;
        let mut parts = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice(q, 1, h * dh, dh)?;
            let kh = tape.slice(k, 1, h * dh, dh)?;
            let vh = tape.slice(v, 1, h * dh, dh)?;
            parts.push(attention(tape, qh, kh, vh)?);
        }
        tape.concat(&parts, 1)?
    };
    linear(tape, p, &format!("{name}.o"), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn small(geometry_dim: usize) -> StageConfig {
        let base = if geometry_dim == 4 {
            StageConfig::detector()
        } else {
            StageConfig::keypointer()
        };
        StageConfig {
            embed_dim: 16,
            ffn_dim: 24,
            encoder_layers: 1,
            decoder_layers: 1,
            ..base
        }
    }

    fn scene_raster(seed: u64, h: usize, w: usize) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::from_data(
            h,
            w,
            (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
    }

    #[test]
    fn positional_encodings_are_pairwise_distinct() {
        let pe = positional_encoding(8, 8, 64);
        let mut min = f64::INFINITY;
        for a in 0..64 {
            for b in a + 1..64 {
                let d: f64 = pe
                    .row(a)
                    .iter()
                    .zip(pe.row(b))
                    .map(|(x, y)| (x - y).powi(2))
                    .sum();
                min = min.min(d.sqrt());
            }
        }
        assert!(min > 1e-3, "closest pair {min}");
    }

    #[test]
    fn token_count_matches_the_grid() {
        let cfg = small(4);
        let m = SetPredictor::new(cfg.clone(), 1).unwrap();
        let mut t = Tape::new();
        let p = m.params.bind(&mut t, false);
        let mem = m
            .encode_scene(&mut t, &p, &scene_raster(1, 64, 64))
            .unwrap();
        assert_eq!(t.shape(mem), &[64, cfg.embed_dim]);
    }

    #[test]
    fn zero_weights_on_zero_raster_leave_the_positional_term() {
        let cfg = StageConfig {
            encoder_layers: 0,
            ..small(4)
        };
        let mut m = SetPredictor::new(cfg.clone(), 1).unwrap();
        for (_, v) in m.params.iter_mut() {
            v.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut t = Tape::new();
        let p = m.params.bind(&mut t, false);
        let mem = m.encode_scene(&mut t, &p, &Raster::zeros(64, 64)).unwrap();
        assert_eq!(t.value(mem), &positional_encoding(8, 8, cfg.embed_dim));
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let m = SetPredictor::new(small(4), 1).unwrap();
        let mut t = Tape::new();
        let p = m.params.bind(&mut t, false);
        assert!(m.encode_scene(&mut t, &p, &Raster::zeros(32, 64)).is_err());
    }

    #[test]
    fn output_cardinality_and_ranges_are_fixed() {
        for gd in [4, 2] {
            let cfg = small(gd);
            let m = SetPredictor::new(cfg.clone(), 3).unwrap();
            for s in 0..3 {
                let pred = m.predict(&scene_raster(s, 64, 64)).unwrap();
                assert_eq!(pred.num_slots(), cfg.num_queries);
                assert_eq!(pred.geometry.cols(), gd);
                for j in 0..pred.num_slots() {
                    let sum: f64 = pred.class_probs.row(j).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9);
                }
                assert!(pred
                    .geometry
                    .data()
                    .iter()
                    .all(|&g| (0.0..=1.0).contains(&g)));
            }
        }
    }

    #[test]
    fn permuting_queries_permutes_outputs() {
        let cfg = small(4);
        let m = SetPredictor::new(cfg.clone(), 5).unwrap();
        let perm = [3, 0, 7, 1, 6, 2, 5, 4];
        let mut pm = m.clone();
        let q = m.params.get("query").unwrap();
        let d = cfg.embed_dim;
        let permuted: Vec<f64> = perm.iter().flat_map(|&i| q.row(i).to_vec()).collect();
        *pm.params.get_mut("query").unwrap() = Tensor::matrix(8, d, permuted).unwrap();
        let r = scene_raster(9, 64, 64);
        let a = m.predict(&r).unwrap();
        let b = pm.predict(&r).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for (x, y) in a.class_probs.row(i).iter().zip(b.class_probs.row(k)) {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in a.geometry.row(i).iter().zip(b.geometry.row(k)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let cfg = small(4);
        let m = SetPredictor::new(cfg, 2).unwrap();
        let mut t = Tape::new();
        let p = m.params.bind(&mut t, true);
        let out = m.forward(&mut t, &p, &scene_raster(2, 64, 64)).unwrap();
        let gt = [crate::geometry::BBox::new(0.4, 0.5, 0.3, 0.6).unwrap()];
        let l = crate::losses::hungarian_loss_boxes(
            &mut t,
            &gt,
            &out,
            &crate::losses::LossWeights::default(),
        )
        .unwrap();
        let mut g = t.backward(l.loss).unwrap();
        let grads = m.params.collect_grads(&p, &mut g);
        for (name, gr) in &grads {
            let norm: f64 = gr.data().iter().map(|x| x * x).sum();
            assert!(norm > 0.0, "{name} has zero gradient");
        }
    }

    #[test]
    fn attention_block_gradients_match_finite_differences() {
        let cfg = StageConfig {
            embed_dim: 8,
            heads: 2,
            ..small(4)
        };
        let m = SetPredictor::new(cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = uniform(&mut rng, &[5, 8], 1.0);
        let ctx = uniform(&mut rng, &[7, 8], 1.0);
        let err = grad_check(
            |t, x| {
                let p = m.params.bind(t, false);
                let c = t.constant(ctx.clone());
                let y = mha(t, &p, "dec.0.cross", x, c, 2)?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn from_params_rejects_foreign_layouts() {
        let m = SetPredictor::new(small(4), 1).unwrap();
        assert!(SetPredictor::from_params(small(4), m.params.clone()).is_ok());
        assert!(SetPredictor::from_params(small(2), m.params).is_err());
    }

    #[test]
    fn checkpoint_round_trip_keeps_config_and_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = SetPredictor::new(small(4), 9).unwrap();
        m.save(&path, serde_json::json!({ "iteration": 12 })).unwrap();
        let (back, extra) = SetPredictor::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(extra["iteration"], 12);
    }

    #[test]
    fn class_head_reset_touches_only_the_class_head() {
        let m = SetPredictor::new(small(4), 3).unwrap();
        let mut r = m.clone();
        r.reset_class_head(99);
        for (name, t) in m.params.iter() {
            let changed = r.params.get(name).unwrap() != t;
            assert_eq!(changed, name == "head.cls.w", "{name}");
        }
    }
}
