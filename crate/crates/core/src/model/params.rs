use std::collections::HashMap;

use super::config::ModelConfig;
use crate::autograd::{Graph, Tensor, Var};
use crate::error::{bail, Result};
use crate::numerics::Rng;

/// Rows of the GPT-2 token-embedding table, which the channel model never
/// uses but a GPT-2 checkpoint would carry.
pub const GPT2_VOCAB: usize = 50_257;

pub const POST_CONV_FILTERS: usize = 64;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Name, shape and initial trainability of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    pub grad: Option<Tensor>,
}

/// Named parameter set of one model instance.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

/// Parameter counts split by trainability.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamReport {
    pub trainable: usize,
    pub frozen: usize,
    /// Frozen parameters inside backbone layers.
    pub frozen_backbone_layers: usize,
    /// Size of a GPT-2 token table at width `d` (not part of the model).
    pub unused_token_table: usize,
}

impl ParamReport {
    pub fn total(&self) -> usize {
        self.trainable + self.frozen
    }

    /// Frozen count a full GPT-2 checkpoint would report, token table included.
    pub fn frozen_incl_token_table(&self) -> usize {
        self.frozen + self.unused_token_table
    }

    /// Counts from the layout alone, without allocating tensors.
    pub fn for_config(cfg: &ModelConfig) -> Result<Self> {
        Ok(Self::tally(cfg, layout(cfg)?.iter().map(|s| (s.name.as_str(), s.numel(), s.trainable))))
    }

    fn tally<'a>(cfg: &ModelConfig, items: impl Iterator<Item = (&'a str, usize, bool)>) -> Self {
        let mut r = ParamReport { trainable: 0, frozen: 0, frozen_backbone_layers: 0, unused_token_table: GPT2_VOCAB * cfg.d };
        for (name, n, trainable) in items {
            if trainable {
                r.trainable += n;
            } else {
                r.frozen += n;
                if name.starts_with("backbone.layer") {
                    r.frozen_backbone_layers += n;
                }
            }
        }
        r
    }
}

/// Closed-form parameter count of one GPT-2 decoder layer of width `d`:
/// two layer norms (`4d`), fused QKV (`3d² + 3d`), output projection
/// (`d² + d`) and the `4d` MLP (`8d² + 5d`).
pub fn backbone_layer_params(d: usize) -> usize {
    12 * d * d + 13 * d
}

fn is_frozen(cfg: &ModelConfig, name: &str) -> bool {
    let Some(rest) = name.strip_prefix("backbone.layer") else { return false };
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse::<usize>().is_ok_and(|k| k >= 1 && k <= cfg.n_frozen())
}

/// Every parameter of the model in canonical order, with trainability set by
/// the freeze partition.
pub fn layout(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let (m, f, d, heads) = (cfg.m, cfg.f, cfg.d, cfg.heads);
    let ds = cfg.spatial_head_dim();
    let mut out = Vec::new();
    let mut add = |name: String, shape: &[usize], init: Init| {
        let trainable = !is_frozen(cfg, &name);
        out.push(ParamSpec { name, shape: shape.to_vec(), trainable, init });
    };
    let ln = |add: &mut dyn FnMut(String, &[usize], Init), p: &str, n: usize| {
        add(format!("{p}.gamma"), &[n], Init::Ones);
        add(format!("{p}.beta"), &[n], Init::Zeros);
    };

    add("pre.conv.k".into(), &[3, 3, 2, f], Init::Normal);
    add("pre.conv.b".into(), &[f], Init::Zeros);
    for blk in 1..=2 {
        let p = format!("embed.block{blk}");
        for w in ["wq", "wk", "wv"] {
            add(format!("{p}.feat_attn.{w}"), &[f, heads * f], Init::Normal);
        }
        add(format!("{p}.feat_attn.wo"), &[heads * f, f], Init::Normal);
        for w in ["wq", "wk", "wv"] {
            add(format!("{p}.spat_attn.{w}"), &[m, heads * ds], Init::Normal);
        }
        add(format!("{p}.spat_attn.wo"), &[heads * ds, m], Init::Normal);
        add(format!("{p}.fuse_fc.w"), &[2 * f, f], Init::Normal);
        add(format!("{p}.fuse_fc.b"), &[f], Init::Zeros);
        ln(&mut add, &format!("{p}.ln1"), f);
        add(format!("{p}.ffn.w1"), &[f, cfg.ffn_mult * f], Init::Normal);
        add(format!("{p}.ffn.b1"), &[cfg.ffn_mult * f], Init::Zeros);
        add(format!("{p}.ffn.w2"), &[cfg.ffn_mult * f, f], Init::Normal);
        add(format!("{p}.ffn.b2"), &[f], Init::Zeros);
        ln(&mut add, &format!("{p}.ln2"), f);
    }
    add("embed.proj_fc.w".into(), &[f, d], Init::Normal);
    add("embed.proj_fc.b".into(), &[d], Init::Zeros);
    add("pos_embed".into(), &[m, d], Init::Normal);
    for k in 1..=cfg.n_layers {
        let p = format!("backbone.layer{k}");
        ln(&mut add, &format!("{p}.ln1"), d);
        add(format!("{p}.attn.w_qkv"), &[d, 3 * d], Init::Normal);
        add(format!("{p}.attn.b_qkv"), &[3 * d], Init::Zeros);
        add(format!("{p}.attn.w_o"), &[d, d], Init::Normal);
        add(format!("{p}.attn.b_o"), &[d], Init::Zeros);
        ln(&mut add, &format!("{p}.ln2"), d);
        add(format!("{p}.mlp.w1"), &[d, 4 * d], Init::Normal);
        add(format!("{p}.mlp.b1"), &[4 * d], Init::Zeros);
        add(format!("{p}.mlp.w2"), &[4 * d, d], Init::Normal);
        add(format!("{p}.mlp.b2"), &[d], Init::Zeros);
    }
    ln(&mut add, "backbone.ln_f", d);
    add("post.fc.w".into(), &[d, f], Init::Normal);
    add("post.fc.b".into(), &[f], Init::Zeros);
    let c = POST_CONV_FILTERS;
    add("post.conv1.k".into(), &[3, 3, f, c], Init::Normal);
    add("post.conv1.b".into(), &[c], Init::Zeros);
    add("post.conv2.k".into(), &[3, 3, c, c], Init::Normal);
    add("post.conv2.b".into(), &[c], Init::Zeros);
    add("post.conv3.k".into(), &[3, 3, c, 2], Init::Zeros);
    add("post.conv3.b".into(), &[2], Init::Zeros);
    Ok(out)
}

fn truncated_normal(rng: &mut Rng, std: f64) -> f64 {
    loop {
        let z = rng.standard_normal();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl ModelParams {
    /// Fresh parameters: truncated normal (std 0.02, cut at 2σ) weights, zero
    /// biases, unit layer-norm gains and a zero final convolution, so the
    /// untrained model returns its input unchanged.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let tensors = layout(config)?
            .into_iter()
            .map(|s| {
                let t = match s.init {
                    Init::Normal => Tensor::from_fn(&s.shape, |_| truncated_normal(&mut rng, INIT_STD)),
                    Init::Zeros => Tensor::zeros(&s.shape),
                    Init::Ones => Tensor::full(&s.shape, 1.0),
                };
                Parameter { name: s.name, tensor: t, trainable: s.trainable, grad: None }
            })
            .collect();
        Self::from_parts(config.clone(), tensors)
    }

    /// Assembles a parameter set, checking names and shapes against the
    /// layout of `config`.
    pub fn from_parts(config: ModelConfig, params: Vec<Parameter>) -> Result<Self> {
        let specs = layout(&config)?;
        let mut by_name: HashMap<String, Parameter> = HashMap::with_capacity(params.len());
        for p in params {
            if by_name.contains_key(&p.name) {
                bail!(Format, "duplicate parameter {}", p.name);
            }
            by_name.insert(p.name.clone(), p);
        }
        let mut ordered = Vec::with_capacity(specs.len());
        for s in &specs {
            let Some(p) = by_name.remove(&s.name) else {
                bail!(Format, "missing parameter {}", s.name);
            };
            if p.tensor.shape() != s.shape.as_slice() {
                bail!(Format, "parameter {} has shape {:?}, config expects {:?}", s.name, p.tensor.shape(), s.shape);
            }
            ordered.push(p);
        }
        if !by_name.is_empty() {
            let mut names: Vec<_> = by_name.into_keys().collect();
            names.sort();
            bail!(Format, "unknown parameters: {}", names.join(", "));
        }
        let index = ordered.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(Self { config, params: ordered, index })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.position(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.position(name).map(|i| &mut self.params[i])
    }

    /// Overwrites a tensor by name, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let Some(p) = self.get_mut(name) else { bail!(InvalidArgument, "no parameter named {}", name) };
        if p.tensor.shape() != tensor.shape() {
            bail!(Shape, "parameter {} has shape {:?}, got {:?}", name, p.tensor.shape(), tensor.shape());
        }
        p.tensor = tensor;
        Ok(())
    }

    /// Adds every parameter to `g` as a leaf. With `track_grads`, trainable
    /// parameters require gradients; frozen ones never do.
    pub fn bind(&self, g: &mut Graph, track_grads: bool) -> Bound<'_> {
        let vars = self.params.iter().map(|p| g.leaf(p.tensor.clone(), track_grads && p.trainable)).collect();
        Bound { params: self, vars }
    }

    /// Binds already created leaves, one per parameter in canonical order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound<'_>> {
        if vars.len() != self.params.len() {
            bail!(InvalidArgument, "expected {} variables, got {}", self.params.len(), vars.len());
        }
        Ok(Bound { params: self, vars })
    }
}

/// Graph variables of a bound parameter set.
pub struct Bound<'a> {
    params: &'a ModelParams,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        match self.params.position(name) {
            Some(i) => Ok(self.vars[i]),
            None => bail!(InvalidArgument, "no parameter named {}", name),
        }
    }
}

/// Applies the freeze partition: all parameters of backbone layers
/// `1..=n_layers − n_tuned` become frozen, everything else trainable.
pub fn freeze_partition(params: &mut ModelParams) {
    let cfg = params.config.clone();
    for p in params.params.iter_mut() {
        p.trainable = !is_frozen(&cfg, &p.name);
    }
}

/// Parameter counts by the current trainable flags.
pub fn param_count(params: &ModelParams) -> ParamReport {
    ParamReport::tally(&params.config, params.params.iter().map(|p| (p.name.as_str(), p.tensor.numel(), p.trainable)))
}
