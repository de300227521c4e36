//! The glimpse agent: glimpse network, location embedding, recurrent core,
//! context network over the inhibited tile, Gaussian location policy, and
//! the per-step classifier and baseline heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::glimpse_env::{GlimpseConfig, GlimpseEnv, GlimpsePair, PixelBox, TileView};
use crate::kv::KvMap;
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, max_pool, max_pool_backward, relu, relu_backward, softmax, Conv2d, Init,
    Linear, Lstm, LstmCache, LstmState, ParamBuilder, ParamStore, PoolIndex, Tensor,
};
use crate::scalar::{lit, to_f64, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct AgentConfig {
    pub num_classes: usize,
    pub glimpse: GlimpseConfig,
    /// Mean-pool applied to each glimpse before the glimpse CNN.
    pub retina_pool: usize,
    pub glimpse_channels: (usize, usize),
    /// Size of `v_gt`, `v_lt` and `v_t`.
    pub feature_size: usize,
    pub lstm_sizes: Vec<usize>,
    pub context_pool: usize,
    pub context_channels: usize,
    pub context_maxpool: usize,
    pub sigma: f64,
}

impl AgentConfig {
    pub fn her2() -> Self {
        AgentConfig {
            num_classes: 4,
            glimpse: GlimpseConfig::default(),
            retina_pool: 8,
            glimpse_channels: (16, 32),
            feature_size: 256,
            lstm_sizes: vec![256, 128],
            context_pool: 4,
            context_channels: 8,
            context_maxpool: 4,
            sigma: 0.15,
        }
    }

    pub fn mmr() -> Self {
        AgentConfig { num_classes: 2, ..Self::her2() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("agent needs at least two classes".into()));
        }
        if self.lstm_sizes.is_empty() || self.lstm_sizes.contains(&0) {
            return Err(Error::Config("lstm_sizes must be a nonempty list of positive sizes".into()));
        }
        if self.retina_pool == 0 || self.context_pool == 0 || self.context_maxpool == 0 {
            return Err(Error::Config("pool sizes must be positive".into()));
        }
        if self.feature_size == 0 || self.glimpse_channels.0 == 0 || self.glimpse_channels.1 == 0 || self.context_channels == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config("policy sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        *self.lstm_sizes.last().unwrap()
    }

    fn context_side(&self) -> usize {
        self.glimpse.context_size.div_ceil(self.context_pool).div_ceil(self.context_maxpool)
    }

    pub fn from_kv(kv: &mut KvMap, prefix: &str, d: Self) -> Result<Self> {
        let k = |s: &str| format!("{prefix}{s}");
        let channels: Vec<usize> = kv.take_list(&k("glimpse_channels"))?.unwrap_or(vec![d.glimpse_channels.0, d.glimpse_channels.1]);
        if channels.len() != 2 {
            return Err(Error::Config(format!("{} takes two values", k("glimpse_channels"))));
        }
        let cfg = AgentConfig {
            num_classes: kv.take_or(&k("num_classes"), d.num_classes)?,
            glimpse: GlimpseConfig {
                glimpse_size: kv.take_or(&k("glimpse_size"), d.glimpse.glimpse_size)?,
                steps: kv.take_or(&k("steps"), d.glimpse.steps)?,
                context_size: kv.take_or(&k("context_size"), d.glimpse.context_size)?,
            },
            retina_pool: kv.take_or(&k("retina_pool"), d.retina_pool)?,
            glimpse_channels: (channels[0], channels[1]),
            feature_size: kv.take_or(&k("feature_size"), d.feature_size)?,
            lstm_sizes: kv.take_list(&k("lstm_sizes"))?.unwrap_or(d.lstm_sizes),
            context_pool: kv.take_or(&k("context_pool"), d.context_pool)?,
            context_channels: kv.take_or(&k("context_channels"), d.context_channels)?,
            context_maxpool: kv.take_or(&k("context_maxpool"), d.context_maxpool)?,
            sigma: kv.take_or(&k("sigma"), d.sigma)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KvMap, prefix: &str) {
        let k = |s: &str| format!("{prefix}{s}");
        kv.insert(k("num_classes"), self.num_classes);
        kv.insert(k("glimpse_size"), self.glimpse.glimpse_size);
        kv.insert(k("steps"), self.glimpse.steps);
        kv.insert(k("context_size"), self.glimpse.context_size);
        kv.insert(k("retina_pool"), self.retina_pool);
        kv.insert(k("glimpse_channels"), format!("{},{}", self.glimpse_channels.0, self.glimpse_channels.1));
        kv.insert(k("feature_size"), self.feature_size);
        kv.insert(k("lstm_sizes"), crate::kv::join_list(&self.lstm_sizes));
        kv.insert(k("context_pool"), self.context_pool);
        kv.insert(k("context_channels"), self.context_channels);
        kv.insert(k("context_maxpool"), self.context_maxpool);
        kv.insert(k("sigma"), self.sigma);
    }
}

/// Log-density of an isotropic Gaussian in two dimensions.
pub fn gaussian_log_prob(mean: (f64, f64), sample: (f64, f64), sigma: f64) -> f64 {
    let q = ((sample.0 - mean.0).powi(2) + (sample.1 - mean.1).powi(2)) / (2.0 * sigma * sigma);
    -q - 2.0 * (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput<S> {
    pub loc_mean: (S, S),
    /// Pre-clamp draw; the location actually visited is its clamp.
    pub loc_sample: (S, S),
    pub loc_log_prob: S,
}

impl<S: Scalar> PolicyOutput<S> {
    pub fn location(&self) -> (f64, f64) {
        (to_f64(self.loc_sample.0).clamp(-1.0, 1.0), to_f64(self.loc_sample.1).clamp(-1.0, 1.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord<S> {
    pub loc: (f64, f64),
    pub logits: Vec<S>,
    pub probs: Vec<S>,
    pub prediction: usize,
    pub baseline: S,
    /// The action choosing the next location; absent on the last step.
    pub policy: Option<PolicyOutput<S>>,
}

/// Everything observable about one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode<S> {
    pub steps: Vec<StepRecord<S>>,
    pub visited: Vec<PixelBox>,
    pub pixels_read: u64,
}

impl<S: Scalar> Episode<S> {
    pub fn final_step(&self) -> &StepRecord<S> {
        self.steps.last().expect("episodes have at least one step")
    }

    pub fn final_probs(&self) -> &[S] {
        &self.final_step().probs
    }

    pub fn final_class(&self) -> usize {
        self.final_step().prediction
    }

    pub fn locations(&self) -> Vec<(f64, f64)> {
        self.steps.iter().map(|s| s.loc).collect()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.prediction).collect()
    }
}

#[derive(Clone, Debug)]
pub struct GlimpseCache<S> {
    /// Per glimpse resolution: input, conv1 out, pool index, pooled, conv2 out.
    trunks: Vec<TrunkCache<S>>,
    concat: Vec<S>,
    v_g: Vec<S>,
    loc: Vec<S>,
    v_l: Vec<S>,
}

#[derive(Clone, Debug)]
struct TrunkCache<S> {
    input: Tensor<S>,
    a1: Tensor<S>,
    pool: PoolIndex,
    p1: Tensor<S>,
    a2: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct ContextCache<S> {
    input: Tensor<S>,
    a1: Tensor<S>,
    pool: PoolIndex,
    flat: Vec<S>,
    out: Vec<S>,
}

#[derive(Clone, Debug)]
struct PolicyCache<S> {
    context: ContextCache<S>,
    h: Vec<S>,
    u: Vec<S>,
    mean: [S; 2],
}

#[derive(Clone, Debug)]
struct StepCache<S> {
    glimpse: GlimpseCache<S>,
    lstm: Vec<LstmCache<S>>,
    h: Vec<S>,
    policy: Option<PolicyCache<S>>,
}

/// Activations retained for backpropagation through an episode.
#[derive(Clone, Debug)]
pub struct EpisodeCache<S> {
    steps: Vec<StepCache<S>>,
}

/// Upstream gradients for [`Agent::backward`], one entry per step.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeGrads<S> {
    pub d_logits: Vec<Vec<S>>,
    pub d_baseline: Vec<S>,
    /// Coefficient of `∇ log π` for the action taken at each step.
    pub d_log_prob: Vec<S>,
    pub d_loc_mean: Vec<(S, S)>,
}

impl<S: Scalar> EpisodeGrads<S> {
    pub fn zeros(steps: usize, classes: usize) -> Self {
        EpisodeGrads {
            d_logits: vec![vec![S::zero(); classes]; steps],
            d_baseline: vec![S::zero(); steps],
            d_log_prob: vec![S::zero(); steps],
            d_loc_mean: vec![(S::zero(), S::zero()); steps],
        }
    }
}

/// How locations are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyMode {
    /// Sample from the Gaussian policy.
    Sample,
    /// Use the mean (evaluation).
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Agent<S> {
    pub config: AgentConfig,
    pub params: ParamStore<S>,
    g_conv1: Conv2d,
    g_conv2: Conv2d,
    g_fc: Linear,
    l_fc: Linear,
    lstm: Vec<Lstm>,
    classifier: Linear,
    baseline: Linear,
    c_conv: Conv2d,
    c_fc: Linear,
    loc_head: Linear,
}

impl<S: Scalar> Agent<S> {
    pub fn new(config: AgentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::new(seed);
        let (c1, c2) = config.glimpse_channels;
        let d = config.feature_size;
        let g_conv1 = Conv2d::new(&mut pb, "glimpse.conv1", 3, c1, 3);
        let g_conv2 = Conv2d::new(&mut pb, "glimpse.conv2", c1, c2, 3);
        let g_fc = Linear::new(&mut pb, "glimpse.fc", 2 * c2, d);
        let l_fc = Linear {
            input: 2,
            output: d,
            weight: pb.alloc("where.weight", 2 * d, Init::Uniform(0.5)),
            bias: pb.alloc("where.bias", d, Init::Constant(1.0)),
        };
        let mut lstm = Vec::new();
        let mut input = d;
        for (i, &hsz) in config.lstm_sizes.iter().enumerate() {
            lstm.push(Lstm::new(&mut pb, &format!("core.lstm{i}"), input, hsz));
            input = hsz;
        }
        let hidden = config.hidden();
        let classifier = Linear::new(&mut pb, "classifier", hidden, config.num_classes);
        let baseline = Linear::new(&mut pb, "baseline", hidden, 1);
        let c_conv = Conv2d::new(&mut pb, "context.conv", 3, config.context_channels, 3);
        let side = config.context_side();
        let c_fc = Linear::new(&mut pb, "context.fc", config.context_channels * side * side, hidden);
        let loc_head = Linear {
            input: hidden,
            output: 2,
            weight: pb.alloc("locator.weight", 2 * hidden, Init::Uniform(0.05)),
            bias: pb.alloc("locator.bias", 2, Init::Zeros),
        };
        let mut params = pb.finish();
        for l in &lstm {
            l.init_forget_bias(&mut params.values, S::one());
        }
        Ok(Agent { config, params, g_conv1, g_conv2, g_fc, l_fc, lstm, classifier, baseline, c_conv, c_fc, loc_head })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, values: Vec<S>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::ShapeMismatch { expected: vec![self.params.len()], actual: vec![values.len()] });
        }
        self.params.values = values;
        Ok(())
    }

    fn trunk(&self, img: &image::RgbImage) -> (Vec<S>, TrunkCache<S>) {
        let p = &self.params.values;
        let input = Tensor::from_rgb_pooled(img, self.config.retina_pool);
        let mut a1 = self.g_conv1.forward(p, &input);
        relu(&mut a1.data);
        let (p1, pool) = max_pool(&a1, 2);
        let mut a2 = self.g_conv2.forward(p, &p1);
        relu(&mut a2.data);
        (global_avg_pool(&a2), TrunkCache { input, a1, pool, p1, a2 })
    }

    fn trunk_backward(&self, c: &TrunkCache<S>, d_feat: &[S], g: &mut [S]) {
        let p = &self.params.values;
        let mut d2 = global_avg_pool_backward(c.a2.shape(), d_feat);
        relu_backward(&c.a2.data, &mut d2.data);
        let dp1 = self.g_conv2.backward(p, g, &c.p1, &d2, true).unwrap();
        let mut d1 = max_pool_backward(&c.pool, &dp1);
        relu_backward(&c.a1.data, &mut d1.data);
        self.g_conv1.backward(p, g, &c.input, &d1, false);
    }

    /// `v_t = v_gt ⊙ v_lt`.
    pub fn glimpse_features(&self, pair: &GlimpsePair, loc: (f64, f64)) -> (Vec<S>, GlimpseCache<S>) {
        let p = &self.params.values;
        let (f40, t40) = self.trunk(&pair.g40);
        let (f20, t20) = self.trunk(&pair.g20);
        let concat: Vec<S> = f40.into_iter().chain(f20).collect();
        let mut v_g = self.g_fc.forward(p, &concat);
        relu(&mut v_g);
        let loc_v = vec![lit::<S>(loc.0), lit(loc.1)];
        let v_l = self.l_fc.forward(p, &loc_v);
        let v = v_g.iter().zip(&v_l).map(|(&a, &b)| a * b).collect();
        (v, GlimpseCache { trunks: vec![t40, t20], concat, v_g, loc: loc_v, v_l })
    }

    pub fn glimpse_backward(&self, c: &GlimpseCache<S>, dv: &[S], g: &mut [S]) {
        let p = &self.params.values;
        let mut dvg: Vec<S> = dv.iter().zip(&c.v_l).map(|(&d, &l)| d * l).collect();
        let dvl: Vec<S> = dv.iter().zip(&c.v_g).map(|(&d, &a)| d * a).collect();
        self.l_fc.backward(p, g, &c.loc, &dvl, false);
        relu_backward(&c.v_g, &mut dvg);
        let dcat = self.g_fc.backward(p, g, &c.concat, &dvg, true).unwrap();
        let half = dcat.len() / 2;
        self.trunk_backward(&c.trunks[0], &dcat[..half], g);
        self.trunk_backward(&c.trunks[1], &dcat[half..], g);
    }

    /// One update of the stacked recurrent core; the top layer's hidden
    /// state is the agent state `h_t`.
    pub fn core_step(&self, states: &[LstmState<S>], v: &[S]) -> (Vec<LstmState<S>>, Vec<LstmCache<S>>) {
        let p = &self.params.values;
        let mut x = v.to_vec();
        let mut next = Vec::with_capacity(self.lstm.len());
        let mut caches = Vec::with_capacity(self.lstm.len());
        for (layer, prev) in self.lstm.iter().zip(states) {
            let (s, c) = layer.forward(p, &x, prev);
            x = s.h.clone();
            next.push(s);
            caches.push(c);
        }
        (next, caches)
    }

    pub fn initial_state(&self) -> Vec<LstmState<S>> {
        self.config.lstm_sizes.iter().map(|&h| LstmState::zeros(h)).collect()
    }

    pub fn context_features(&self, img: &image::RgbImage) -> (Vec<S>, ContextCache<S>) {
        let p = &self.params.values;
        let input = Tensor::from_rgb_pooled(img, self.config.context_pool);
        let mut a1 = self.c_conv.forward(p, &input);
        relu(&mut a1.data);
        let (pooled, pool) = max_pool(&a1, self.config.context_maxpool);
        let flat = pooled.data;
        let mut out = self.c_fc.forward(p, &flat);
        relu(&mut out);
        (out.clone(), ContextCache { input, a1, pool, flat, out })
    }

    fn context_backward(&self, c: &ContextCache<S>, d_out: &[S], g: &mut [S]) {
        let p = &self.params.values;
        let mut d = d_out.to_vec();
        relu_backward(&c.out, &mut d);
        let dflat = self.c_fc.backward(p, g, &c.flat, &d, true).unwrap();
        let side = self.config.context_side();
        let dpool = Tensor::from_vec(self.config.context_channels, side, side, dflat);
        let mut da = max_pool_backward(&c.pool, &dpool);
        relu_backward(&c.a1.data, &mut da.data);
        self.c_conv.backward(p, g, &c.input, &da, false);
    }

    /// Mean of the location policy: `tanh(W (h ⊙ c) + b)`.
    pub fn location_mean(&self, h: &[S], context: &[S]) -> ((S, S), Vec<S>) {
        let u: Vec<S> = h.iter().zip(context).map(|(&a, &b)| a * b).collect();
        let z = self.loc_head.forward(&self.params.values, &u);
        ((z[0].tanh(), z[1].tanh()), u)
    }

    /// Draws the next location. With `PolicyMode::Mean` the sample is the mean.
    pub fn propose_location(&self, h: &[S], context: &[S], mode: PolicyMode, rng: &mut impl Rng) -> PolicyOutput<S> {
        let ((mx, my), _) = self.location_mean(h, context);
        self.policy_output((mx, my), mode, rng)
    }

    fn policy_output(&self, (mx, my): (S, S), mode: PolicyMode, rng: &mut impl Rng) -> PolicyOutput<S> {
        let sigma = self.config.sigma;
        let (sx, sy) = match mode {
            PolicyMode::Mean => (to_f64(mx), to_f64(my)),
            PolicyMode::Sample => {
                let ex: f64 = StandardNormal.sample(rng);
                let ey: f64 = StandardNormal.sample(rng);
                (to_f64(mx) + sigma * ex, to_f64(my) + sigma * ey)
            }
        };
        let lp = if sigma > 0.0 { gaussian_log_prob((to_f64(mx), to_f64(my)), (sx, sy), sigma) } else { 0.0 };
        PolicyOutput { loc_mean: (mx, my), loc_sample: (lit(sx), lit(sy)), loc_log_prob: lit(lp) }
    }

    /// Class logits and probabilities from the agent state.
    pub fn classify(&self, h: &[S]) -> (Vec<S>, Vec<S>) {
        let logits = self.classifier.forward(&self.params.values, h);
        let probs = softmax(&logits);
        (logits, probs)
    }

    /// Plays one episode over `view`. The first location is uniform in
    /// `[−1, 1]²`; all randomness comes from `seed`.
    pub fn run_episode(&self, view: TileView<'_>, mode: PolicyMode, seed: u64) -> Result<(Episode<S>, EpisodeCache<S>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
        let (mut env, mut pair) = GlimpseEnv::reset(view, self.config.glimpse.clone(), first)?;
        let t_max = self.config.glimpse.steps;
        let mut states = self.initial_state();
        let mut steps = Vec::with_capacity(t_max);
        let mut caches = Vec::with_capacity(t_max);
        let p = &self.params.values;
        for t in 0..t_max {
            let loc = env.state.loc;
            let (v, gcache) = self.glimpse_features(&pair, loc);
            let (next, lcache) = self.core_step(&states, &v);
            states = next;
            let h = states.last().unwrap().h.clone();
            let (logits, probs) = self.classify(&h);
            let prediction = argmax(&probs);
            let baseline = self.baseline.forward(p, &h)[0];
            let (policy, pcache) = if t + 1 < t_max {
                let ctx_img = env.context_after_ior();
                let (c, ccache) = self.context_features(&ctx_img);
                let (mean, u) = self.location_mean(&h, &c);
                let out = self.policy_output(mean, mode, &mut rng);
                let pc = PolicyCache { context: ccache, h: h.clone(), u, mean: [mean.0, mean.1] };
                (Some(out), Some(pc))
            } else {
                (None, None)
            };
            let next_loc = policy.as_ref().map(|o| o.location());
            steps.push(StepRecord { loc, logits, probs, prediction, baseline, policy });
            caches.push(StepCache { glimpse: gcache, lstm: lcache, h, policy: pcache });
            if let Some(np) = env.step(next_loc, prediction)? {
                pair = np;
            }
        }
        let episode = Episode { steps, visited: env.state.visited.clone(), pixels_read: env.pixels_read };
        Ok((episode, EpisodeCache { steps: caches }))
    }

    /// Accumulates parameter gradients for one episode.
    pub fn backward(&self, episode: &Episode<S>, cache: &EpisodeCache<S>, up: &EpisodeGrads<S>, g: &mut [S]) {
        let p = &self.params.values;
        let sigma2: S = lit(self.config.sigma * self.config.sigma);
        let n_layers = self.lstm.len();
        let mut dh_next: Vec<Vec<S>> = self.config.lstm_sizes.iter().map(|&h| vec![S::zero(); h]).collect();
        let mut dc_next = dh_next.clone();
        for t in (0..cache.steps.len()).rev() {
            let sc = &cache.steps[t];
            let rec = &episode.steps[t];
            // Policy path: the agent state enters detached, so only the
            // locator and context network receive these gradients.
            if let (Some(pc), Some(po)) = (&sc.policy, &rec.policy) {
                let coef = up.d_log_prob[t];
                let (dmx, dmy) = up.d_loc_mean[t];
                let mut dmean = [dmx, dmy];
                if self.config.sigma > 0.0 {
                    dmean[0] += coef * (po.loc_sample.0 - pc.mean[0]) / sigma2;
                    dmean[1] += coef * (po.loc_sample.1 - pc.mean[1]) / sigma2;
                }
                if dmean[0] != S::zero() || dmean[1] != S::zero() {
                    let dz: Vec<S> = (0..2).map(|i| dmean[i] * (S::one() - pc.mean[i] * pc.mean[i])).collect();
                    let du = self.loc_head.backward(p, g, &pc.u, &dz, true).unwrap();
                    let dc: Vec<S> = du.iter().zip(&pc.h).map(|(&d, &h)| d * h).collect();
                    self.context_backward(&pc.context, &dc, g);
                }
            }
            if up.d_baseline[t] != S::zero() {
                self.baseline.backward(p, g, &sc.h, &[up.d_baseline[t]], false);
            }
            let mut dh = self.classifier.backward(p, g, &sc.h, &up.d_logits[t], true).unwrap();
            for (a, &b) in dh.iter_mut().zip(&dh_next[n_layers - 1]) {
                *a += b;
            }
            let mut dx = dh;
            for l in (0..n_layers).rev() {
                if l < n_layers - 1 {
                    for (a, &b) in dx.iter_mut().zip(&dh_next[l]) {
                        *a += b;
                    }
                }
                let (dxi, dhp, dcp) = self.lstm[l].backward(p, g, &sc.lstm[l], &dx, &dc_next[l]);
                dh_next[l] = dhp;
                dc_next[l] = dcp;
                dx = dxi;
            }
            self.glimpse_backward(&sc.glimpse, &dx, g);
        }
    }
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax<S: PartialOrd + Copy>(v: &[S]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}
