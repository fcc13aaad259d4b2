use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, FACE_INPUT_DIM};
use crate::autodiff::{ParamStore, Tensor};
use crate::virtual_scan::CHANNELS;

/// Initial scale of the vertex head's output layer relative to the default.
const VERTEX_OUT_SCALE: f64 = 0.1;

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, shape: Vec<usize>, bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        Tensor::new(shape, data).expect("shape matches data")
    }

    fn linear(&mut self, name: &str, fan_in: usize, out: usize, scale: f64) {
        let bound = scale / (fan_in as f64).sqrt();
        let w = self.uniform(vec![fan_in, out], bound);
        let b = self.uniform(vec![out], bound);
        self.store.insert(format!("{}.w", name), w, true);
        self.store.insert(format!("{}.b", name), b, true);
    }

    /// First layer split into one weight block per concatenated part.
    fn split_linear(&mut self, name: &str, parts: &[(&str, usize)], out: usize) {
        let fan_in: usize = parts.iter().map(|p| p.1).sum();
        let bound = 1.0 / (fan_in as f64).sqrt();
        for (suffix, width) in parts {
            let w = self.uniform(vec![*width, out], bound);
            self.store.insert(format!("{}{}.w", name, suffix), w, true);
        }
        let b = self.uniform(vec![out], bound);
        self.store.insert(format!("{}.b", name), b, true);
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) {
        let bound = 1.0 / ((c_in * k * k * k) as f64).sqrt();
        let w = self.uniform(vec![c_out, c_in, k, k, k], bound);
        let b = self.uniform(vec![c_out], bound);
        self.store.insert(format!("{}.w", name), w, true);
        self.store.insert(format!("{}.b", name), b, true);
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.store.insert(format!("{}.g", name), Tensor::full(vec![c], 1.0), true);
        self.store.insert(format!("{}.b", name), Tensor::zeros(vec![c]), true);
        self.store.insert(format!("{}.rm", name), Tensor::zeros(vec![c]), false);
        self.store.insert(format!("{}.rv", name), Tensor::full(vec![c], 1.0), false);
    }

    fn mlp(&mut self, name: &str, input: usize, out: usize) {
        self.linear(&format!("{}.l1", name), input, out, 1.0);
        self.mlp_tail(name, out);
    }

    fn mlp_tail(&mut self, name: &str, out: usize) {
        self.linear(&format!("{}.l2", name), out, out, 1.0);
        self.bn(&format!("{}.bn", name), out);
    }
}

pub(super) fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut it = Init { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
    let [c0, c1, c2, c3] = cfg.encoder_channels;
    it.conv("enc.c1", CHANNELS, c0, 4);
    it.conv("enc.c1p", c0, c0, 1);
    it.conv("enc.c2", c0, c1, 3);
    it.conv("enc.c2p", c1, c1, 1);
    it.conv("enc.c3", c1, c2, 3);
    it.conv("enc.c3p", c2, c2, 1);
    it.conv("enc.c4", c2, c3, 3);

    it.linear("vtx.l1", cfg.latent_dim(), cfg.vertex_hidden, 1.0);
    it.linear("vtx.l2", cfg.vertex_hidden, 3 * cfg.n_vertices, VERTEX_OUT_SCALE);

    let (h, e, f) = (cfg.node_hidden, cfg.edge_hidden, cfg.face_hidden);
    for net in ["edge", "direct"] {
        it.mlp(&format!("{}.pos", net), 3, h / 2);
        it.mlp(&format!("{}.feat", net), cfg.f2_channels(), h / 2);
        it.linear(&format!("{}.cls", net), e, 2, 1.0);
    }
    for r in 0..=cfg.edge_rounds {
        let fe = format!("edge.fe{}", r);
        it.split_linear(&format!("{}.l1", fe), &[("a", h), ("b", h)], e);
        it.mlp_tail(&fe, e);
        let gf = format!("direct.gf{}", r);
        it.split_linear(&format!("{}.l1", gf), &[("a", h), ("b", h), ("c", h)], e);
        it.mlp_tail(&gf, e);
        if r > 0 {
            it.mlp(&format!("edge.fv{}", r), e, h);
            it.mlp(&format!("direct.gv{}", r), e, h);
        }
    }

    let face_in = FACE_INPUT_DIM + if cfg.face_use_f2 { cfg.f2_channels() } else { 0 };
    it.mlp("face.init", face_in, f);
    for r in 1..=cfg.face_rounds {
        let fe = format!("face.fe{}", r);
        it.split_linear(&format!("{}.l1", fe), &[("a", f), ("b", f)], f);
        it.mlp_tail(&fe, f);
        it.mlp(&format!("face.fv{}", r), 2 * f, f);
    }
    it.linear("face.cls", f, 2, 1.0);
    store
}
