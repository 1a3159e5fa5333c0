//! The segmentation network: a strided conv backbone feeding a sparse
//! pyramid transformer encoder, a spatial branch that supplies the decoder's
//! context queries and predicts boundaries and directions, and a decoder
//! whose output is classified at stride 8 and upsampled to full resolution.
//!
//! Parameters live in a [`ParamStore`]; [`Unept`] only records where each
//! tensor sits, so the same layout can run against perturbed copies.

mod config;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    encode_queries_tape, glorot, level_rows, normalized_reference_grid, sparse_attention_tape, SparseAttentionParams,
    SparseAttentionVars, SparseGeometry, SparseOutput,
};
use crate::numerics::{GridLevel, NumericsError, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};

pub use config::EptConfig;

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input shape {shape:?}: {detail}")]
    Input { shape: Vec<usize>, detail: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Whether dropout is active; training draws its masks from the given stream.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    geometry: SparseGeometry,
    wq: ParamId,
    wv: ParamId,
    u_wts: ParamId,
    b_wts: ParamId,
    u_pos: ParamId,
    b_pos: ParamId,
    wo: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    attn: Attn,
    norm1: Norm,
    ff: FeedForward,
    norm2: Norm,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    self_attn: Attn,
    norm1: Norm,
    cross_attn: Attn,
    norm2: Norm,
    ff: FeedForward,
    norm3: Norm,
}

#[derive(Clone, Copy, Debug)]
struct Head {
    hidden: Conv,
    norm: Norm,
    out: Conv,
}

/// Tape handles of one forward pass.
pub struct UneptOutput {
    /// `K×H×W`
    pub seg_logits: Var,
    /// `1×H×W`
    pub boundary_logits: Var,
    /// `m×H×W`
    pub direction_logits: Var,
    /// Cross-attention of every decoder layer, queries on the stride-8 grid.
    pub cross_attention: Vec<SparseOutput>,
    /// Pyramid scale shapes, fine to coarse.
    pub shapes: Vec<(usize, usize)>,
}

/// Parameter layout of the network for one configuration.
#[derive(Clone, Debug)]
pub struct Unept {
    config: EptConfig,
    stem: [Conv; 2],
    stages: Vec<Conv>,
    projections: Vec<Conv>,
    scale_embedding: ParamId,
    encoder: Vec<EncoderLayer>,
    branch: [(Conv, Norm); 3],
    query_proj: Conv,
    boundary_head: Head,
    direction_head: Head,
    decoder: Vec<DecoderLayer>,
    classifier: (ParamId, ParamId),
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, t: Tensor, group: ParamGroup) -> ParamId {
        self.store.add(name, t, group)
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, group: ParamGroup) -> Conv {
        let bound = (6.0 / (c_in * k * k) as f64).sqrt();
        let w = Tensor::from_fn(&[c_out, c_in, k, k], |_| self.rng.gen_range(-bound..=bound));
        Conv {
            w: self.add(format!("{name}.weight"), w, group),
            b: self.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), group),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.add(format!("{name}.gain"), Tensor::full(&[d], 1.0), ParamGroup::Head),
            b: self.add(format!("{name}.bias"), Tensor::zeros(&[d]), ParamGroup::Head),
        }
    }

    fn attn(&mut self, name: &str, geometry: SparseGeometry) -> Result<Attn, ModelError> {
        let p = SparseAttentionParams::init(geometry, &mut self.rng)?;
        let h = ParamGroup::Head;
        Ok(Attn {
            geometry,
            wq: self.add(format!("{name}.wq"), p.wq, h),
            wv: self.add(format!("{name}.wv"), p.wv, h),
            u_wts: self.add(format!("{name}.u_wts"), p.u_wts, h),
            b_wts: self.add(format!("{name}.b_wts"), p.b_wts, h),
            u_pos: self.add(format!("{name}.u_pos"), p.u_pos, h),
            b_pos: self.add(format!("{name}.b_pos"), p.b_pos, h),
            wo: self.add(format!("{name}.wo"), p.wo, h),
        })
    }

    fn ff(&mut self, name: &str, d: usize, hidden: usize) -> FeedForward {
        let h = ParamGroup::Head;
        let w1 = glorot(&mut self.rng, d, hidden, &[d, hidden]);
        let w2 = glorot(&mut self.rng, hidden, d, &[hidden, d]);
        FeedForward {
            w1: self.add(format!("{name}.w1"), w1, h),
            b1: self.add(format!("{name}.b1"), Tensor::zeros(&[hidden]), h),
            w2: self.add(format!("{name}.w2"), w2, h),
            b2: self.add(format!("{name}.b2"), Tensor::zeros(&[d]), h),
        }
    }

    fn head(&mut self, name: &str, c_in: usize, hidden: usize, c_out: usize) -> Head {
        Head {
            hidden: self.conv(&format!("{name}.hidden"), c_in, hidden, 1, ParamGroup::Head),
            norm: self.norm(&format!("{name}.norm"), hidden),
            out: self.conv(&format!("{name}.out"), hidden, c_out, 1, ParamGroup::Head),
        }
    }
}

fn input_err(shape: &[usize], detail: impl Into<String>) -> ModelError {
    ModelError::Input { shape: shape.to_vec(), detail: detail.into() }
}

/// `C×H×W` → `(H·W)×C`
fn to_tokens(tape: &mut Tape<'_>, x: Var) -> Result<Var, NumericsError> {
    let (c, hw) = (tape.shape(x)[0], tape.shape(x)[1] * tape.shape(x)[2]);
    let flat = tape.reshape(x, &[c, hw])?;
    tape.transpose(flat)
}

/// `(H·W)×C` → `C×H×W`
fn to_planes(tape: &mut Tape<'_>, x: Var, h: usize, w: usize) -> Result<Var, NumericsError> {
    let c = tape.shape(x)[1];
    let t = tape.transpose(x)?;
    tape.reshape(t, &[c, h, w])
}

/// Each token's own normalized centre, for a stack of grids.
fn grid_refs(shapes: &[(usize, usize)]) -> Tensor {
    let mut data = Vec::new();
    for &(h, w) in shapes {
        for r in 0..h {
            for c in 0..w {
                data.push((r as f64 + 0.5) / h as f64);
                data.push((c as f64 + 0.5) / w as f64);
            }
        }
    }
    let n = data.len() / 2;
    Tensor::new(vec![n, 2], data).expect("two coordinates per token")
}

struct Ctx<'m, 'r, 'p> {
    store: &'p ParamStore,
    mode: &'m mut Mode<'r>,
    dropout: f64,
}

impl<'p> Ctx<'_, '_, 'p> {
    fn p(&self, tape: &mut Tape<'p>, id: ParamId) -> Result<Var, NumericsError> {
        tape.param(self.store, id)
    }

    fn drop(&mut self, tape: &mut Tape<'p>, x: Var) -> Result<Var, NumericsError> {
        match self.mode {
            Mode::Train(rng) if self.dropout > 0.0 => tape.dropout(x, self.dropout, &mut **rng),
            _ => Ok(x),
        }
    }

    fn conv(&self, tape: &mut Tape<'p>, c: Conv, x: Var, stride: usize) -> Result<Var, NumericsError> {
        let w = self.p(tape, c.w)?;
        let b = self.p(tape, c.b)?;
        let pad = tape.shape(w)[2] / 2;
        let y = tape.conv2d(x, w, stride, pad)?;
        tape.add_channel(y, b)
    }

    fn layer_norm(&self, tape: &mut Tape<'p>, n: Norm, x: Var) -> Result<Var, NumericsError> {
        let g = self.p(tape, n.g)?;
        let b = self.p(tape, n.b)?;
        tape.layer_norm(x, g, b, NORM_EPS)
    }

    /// Layer norm across channels at every pixel of a `C×H×W` map.
    fn channel_norm(&self, tape: &mut Tape<'p>, n: Norm, x: Var) -> Result<Var, NumericsError> {
        let (h, w) = (tape.shape(x)[1], tape.shape(x)[2]);
        let t = to_tokens(tape, x)?;
        let t = self.layer_norm(tape, n, t)?;
        to_planes(tape, t, h, w)
    }

    fn attn_vars(&self, tape: &mut Tape<'p>, a: &Attn) -> Result<SparseAttentionVars, NumericsError> {
        Ok(SparseAttentionVars {
            geometry: a.geometry,
            wq: self.p(tape, a.wq)?,
            wv: self.p(tape, a.wv)?,
            u_wts: self.p(tape, a.u_wts)?,
            b_wts: self.p(tape, a.b_wts)?,
            u_pos: self.p(tape, a.u_pos)?,
            b_pos: self.p(tape, a.b_pos)?,
            wo: self.p(tape, a.wo)?,
        })
    }

    fn feed_forward(&mut self, tape: &mut Tape<'p>, f: FeedForward, x: Var) -> Result<Var, NumericsError> {
        let (w1, b1, w2, b2) = (self.p(tape, f.w1)?, self.p(tape, f.b1)?, self.p(tape, f.w2)?, self.p(tape, f.b2)?);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h)?;
        let h = self.drop(tape, h)?;
        let y = tape.matmul(h, w2)?;
        tape.add_row(y, b2)
    }

    /// `norm(x + dropout(y))`
    fn residual(&mut self, tape: &mut Tape<'p>, n: Norm, x: Var, y: Var) -> Result<Var, NumericsError> {
        let y = self.drop(tape, y)?;
        let s = tape.add(x, y)?;
        self.layer_norm(tape, n, s)
    }

    fn head(&self, tape: &mut Tape<'p>, h: &Head, x: Var) -> Result<Var, NumericsError> {
        let y = self.conv(tape, h.hidden, x, 1)?;
        let y = self.channel_norm(tape, h.norm, y)?;
        let y = tape.relu(y)?;
        let y = self.conv(tape, h.out, y, 1)?;
        tape.upsample(y, 8)
    }
}

impl Unept {
    /// Registers freshly initialized parameters for `config` in a new store.
    pub fn init(config: EptConfig, seed: u64) -> Result<(Self, ParamStore), ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
        let bb = ParamGroup::Backbone;
        let hd = ParamGroup::Head;
        let [w8, w16, w32] = config.backbone_widths;
        let stem_w = (w8 / 2).max(1);
        let stem = [b.conv("backbone.stem0", 3, stem_w, 3, bb), b.conv("backbone.stem1", stem_w, stem_w, 3, bb)];
        let widths = [w8, w16, w32];
        let mut stages = Vec::new();
        let mut c_in = stem_w;
        for (l, &w) in widths.iter().enumerate().take(config.levels) {
            stages.push(b.conv(&format!("backbone.stage{l}"), c_in, w, 3, bb));
            c_in = w;
        }
        let projections =
            (0..config.levels).map(|l| b.conv(&format!("backbone.proj{l}"), widths[l], config.d_model, 1, bb)).collect();
        let d = config.d_model;
        let bound = (6.0 / (config.levels + d) as f64).sqrt();
        let emb = Tensor::from_fn(&[config.levels, d], |_| b.rng.gen_range(-bound..=bound));
        let scale_embedding = b.add("encoder.scale_embedding".into(), emb, hd);
        let geom = |levels| SparseGeometry {
            d_model: d,
            heads: config.heads,
            head_dim: config.head_dim,
            points: config.points,
            levels,
        };
        let mut encoder = Vec::new();
        for i in 0..config.encoder_layers {
            encoder.push(EncoderLayer {
                attn: b.attn(&format!("encoder.{i}.attn"), geom(config.levels))?,
                norm1: b.norm(&format!("encoder.{i}.norm1"), d),
                ff: b.ff(&format!("encoder.{i}.ff"), d, config.ff_dim),
                norm2: b.norm(&format!("encoder.{i}.norm2"), d),
            });
        }
        let [c1, c2, c3] = config.branch_widths;
        let branch = [
            (b.conv("branch.block0", 3, c1, 3, hd), b.norm("branch.norm0", c1)),
            (b.conv("branch.block1", c1, c2, 3, hd), b.norm("branch.norm1", c2)),
            (b.conv("branch.block2", c2, c3, 3, hd), b.norm("branch.norm2", c3)),
        ];
        let query_proj = b.conv("branch.query", c2, d, 1, hd);
        let boundary_head = b.head("boundary", c3, config.head_width, 1);
        let direction_head = b.head("direction", c3, config.head_width, config.direction_bins);
        let mut decoder = Vec::new();
        for i in 0..config.decoder_layers {
            decoder.push(DecoderLayer {
                self_attn: b.attn(&format!("decoder.{i}.self_attn"), geom(1))?,
                norm1: b.norm(&format!("decoder.{i}.norm1"), d),
                cross_attn: b.attn(&format!("decoder.{i}.cross_attn"), geom(config.levels))?,
                norm2: b.norm(&format!("decoder.{i}.norm2"), d),
                ff: b.ff(&format!("decoder.{i}.ff"), d, config.ff_dim),
                norm3: b.norm(&format!("decoder.{i}.norm3"), d),
            });
        }
        let wc = glorot(&mut b.rng, d, config.classes, &[d, config.classes]);
        let classifier = (b.add("classifier.weight".into(), wc, hd), b.add("classifier.bias".into(), Tensor::zeros(&[config.classes]), hd));
        let net = Self {
            config,
            stem,
            stages,
            projections,
            scale_embedding,
            encoder,
            branch,
            query_proj,
            boundary_head,
            direction_head,
            decoder,
            classifier,
        };
        Ok((net, store))
    }

    pub fn config(&self) -> &EptConfig {
        &self.config
    }

    fn check_image(&self, shape: &[usize], multiple: usize) -> Result<(usize, usize), ModelError> {
        match *shape {
            [3, h, w] if h > 0 && w > 0 && h % multiple == 0 && w % multiple == 0 => Ok((h, w)),
            _ => Err(input_err(shape, format!("expected 3×H×W with H and W multiples of {multiple}"))),
        }
    }

    /// Pyramid token maps, fine to coarse, each `(H_l·W_l)×d_model`, and their shapes.
    pub fn backbone_forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        image: Var,
    ) -> Result<(Vec<Var>, Vec<(usize, usize)>), ModelError> {
        self.check_image(tape.shape(image), 32)?;
        let mut mode = Mode::Eval;
        let cx = Ctx { store, mode: &mut mode, dropout: 0.0 };
        let mut x = image;
        for c in self.stem {
            let y = cx.conv(tape, c, x, 2)?;
            x = tape.relu(y)?;
        }
        let mut maps = Vec::new();
        let mut shapes = Vec::new();
        for (stage, proj) in self.stages.iter().zip(&self.projections) {
            let y = cx.conv(tape, *stage, x, 2)?;
            x = tape.relu(y)?;
            let p = cx.conv(tape, *proj, x, 1)?;
            shapes.push((tape.shape(p)[1], tape.shape(p)[2]));
            maps.push(to_tokens(tape, p)?);
        }
        Ok((maps, shapes))
    }

    /// Encoder over the concatenated pyramid tokens; each token's reference
    /// point is its own position and its query carries the position and scale
    /// encodings.
    pub fn encoder_forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        tokens: Var,
        shapes: &[(usize, usize)],
        mode: &mut Mode<'_>,
    ) -> Result<Var, ModelError> {
        let grid = level_rows(shapes);
        let total: usize = grid.iter().map(GridLevel::len).sum();
        if tape.shape(tokens) != [total, self.config.d_model] || shapes.len() != self.config.levels {
            return Err(input_err(tape.shape(tokens), format!("expected {total}×{} over {} scales", self.config.d_model, self.config.levels)));
        }
        let mut cx = Ctx { store, mode, dropout: self.config.dropout };
        let refs = grid_refs(shapes);
        let scale = cx.p(tape, self.scale_embedding)?;
        let mut x = tokens;
        for layer in &self.encoder {
            let vars = cx.attn_vars(tape, &layer.attn)?;
            let q = encode_queries_tape(tape, x, shapes, scale)?;
            let base = normalized_reference_grid(&refs, &grid, &layer.attn.geometry)?;
            let a = sparse_attention_tape(tape, &vars, q, x, &grid, base)?;
            x = cx.residual(tape, layer.norm1, x, a.out)?;
            let f = cx.feed_forward(tape, layer.ff, x)?;
            x = cx.residual(tape, layer.norm2, x, f)?;
        }
        Ok(x)
    }

    /// Context queries (stride 8, `(H/8·W/8)×d_model`) plus boundary (`1×H×W`)
    /// and direction (`m×H×W`) logits.
    pub fn spatial_branch_forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        image: Var,
    ) -> Result<(Var, Var, Var), ModelError> {
        self.check_image(tape.shape(image), 8)?;
        let mut mode = Mode::Eval;
        let cx = Ctx { store, mode: &mut mode, dropout: 0.0 };
        let mut blocks = Vec::with_capacity(3);
        let mut x = image;
        for (conv, norm) in self.branch {
            let y = cx.conv(tape, conv, x, 2)?;
            let y = cx.channel_norm(tape, norm, y)?;
            x = tape.relu(y)?;
            blocks.push(x);
        }
        let q = cx.conv(tape, self.query_proj, blocks[1], 1)?;
        let q = tape.avg_pool(q, 2)?;
        let queries = to_tokens(tape, q)?;
        let boundary = cx.head(tape, &self.boundary_head, blocks[2])?;
        let direction = cx.head(tape, &self.direction_head, blocks[2])?;
        Ok((queries, boundary, direction))
    }

    /// Decoder over context queries laid out on an `h8×w8` grid, attending to
    /// the encoder output `x_enc` whose scales are `shapes`.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        queries: Var,
        grid8: (usize, usize),
        x_enc: Var,
        shapes: &[(usize, usize)],
        mode: &mut Mode<'_>,
    ) -> Result<(Var, Vec<SparseOutput>), ModelError> {
        let (h8, w8) = grid8;
        if tape.shape(queries) != [h8 * w8, self.config.d_model] {
            return Err(input_err(tape.shape(queries), format!("expected {}×{} context queries", h8 * w8, self.config.d_model)));
        }
        let grid = level_rows(shapes);
        let own = [GridLevel { start: 0, height: h8, width: w8 }];
        let refs = grid_refs(&[grid8]);
        let mut cx = Ctx { store, mode, dropout: self.config.dropout };
        let scale = cx.p(tape, self.scale_embedding)?;
        let mut y = queries;
        let mut cross = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let vars = cx.attn_vars(tape, &layer.self_attn)?;
            let q = encode_queries_tape(tape, y, &[grid8], scale)?;
            let base = normalized_reference_grid(&refs, &own, &layer.self_attn.geometry)?;
            let a = sparse_attention_tape(tape, &vars, q, y, &own, base)?;
            y = cx.residual(tape, layer.norm1, y, a.out)?;

            let vars = cx.attn_vars(tape, &layer.cross_attn)?;
            let q = encode_queries_tape(tape, y, &[grid8], scale)?;
            let base = normalized_reference_grid(&refs, &grid, &layer.cross_attn.geometry)?;
            let a = sparse_attention_tape(tape, &vars, q, x_enc, &grid, base)?;
            y = cx.residual(tape, layer.norm2, y, a.out)?;
            cross.push(a);

            let f = cx.feed_forward(tape, layer.ff, y)?;
            y = cx.residual(tape, layer.norm3, y, f)?;
        }
        Ok((y, cross))
    }

    /// Full network on a `3×H×W` image with H and W multiples of 32.
    pub fn forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        image: Var,
        mode: &mut Mode<'_>,
    ) -> Result<UneptOutput, ModelError> {
        let (h, w) = self.check_image(tape.shape(image), 32)?;
        let (maps, shapes) = self.backbone_forward(tape, store, image)?;
        let tokens = tape.concat_rows(&maps)?;
        let x_enc = self.encoder_forward(tape, store, tokens, &shapes, mode)?;
        let (queries, boundary_logits, direction_logits) = self.spatial_branch_forward(tape, store, image)?;
        let grid8 = (h / 8, w / 8);
        let (y, cross_attention) = self.decoder_forward(tape, store, queries, grid8, x_enc, &shapes, mode)?;
        let wc = tape.param(store, self.classifier.0)?;
        let bc = tape.param(store, self.classifier.1)?;
        let logits = tape.matmul(y, wc)?;
        let logits = tape.add_row(logits, bc)?;
        let planes = to_planes(tape, logits, grid8.0, grid8.1)?;
        let seg_logits = tape.upsample(planes, 8)?;
        Ok(UneptOutput { seg_logits, boundary_logits, direction_logits, cross_attention, shapes })
    }

    /// Eval-mode forward returning plain tensors.
    pub fn predict(&self, store: &ParamStore, image: &Tensor) -> Result<Prediction, ModelError> {
        let mut tape = Tape::new();
        let x = tape.input_ref(image)?;
        let out = self.forward(&mut tape, store, x, &mut Mode::Eval)?;
        Ok(Prediction {
            seg_logits: tape.value(out.seg_logits).clone(),
            boundary_logits: tape.value(out.boundary_logits).clone(),
            direction_logits: tape.value(out.direction_logits).clone(),
        })
    }

    /// Sample locations of the last decoder layer's cross-attention for the
    /// stride-8 query covering image pixel `(y, x)`, converted to image pixel
    /// coordinates, with their attention weights.
    pub fn sample_points(&self, store: &ParamStore, image: &Tensor, y: usize, x: usize) -> Result<Vec<SampledPoint>, ModelError> {
        let (h, w) = self.check_image(image.shape(), 32)?;
        if y >= h || x >= w {
            return Err(input_err(image.shape(), format!("pixel ({y}, {x}) outside the image")));
        }
        let mut tape = Tape::new();
        let img = tape.input_ref(image)?;
        let out = self.forward(&mut tape, store, img, &mut Mode::Eval)?;
        let Some(last) = out.cross_attention.last() else {
            return Ok(Vec::new());
        };
        let q = (y / 8) * (w / 8) + x / 8;
        let c = &self.config;
        let s = c.points * c.levels;
        let loc = &tape.value(last.locations).data()[q * c.heads * s * 2..(q + 1) * c.heads * s * 2];
        let wts = &tape.value(last.weights).data()[q * c.heads * s..(q + 1) * c.heads * s];
        let strides = c.strides();
        let mut points = Vec::with_capacity(c.heads * s);
        for m in 0..c.heads {
            for l in 0..c.levels {
                for n in 0..c.points {
                    let k = (m * c.levels + l) * c.points + n;
                    let stride = strides[l] as f64;
                    points.push(SampledPoint {
                        head: m,
                        level: l,
                        y: (loc[2 * k] + 0.5) * stride - 0.5,
                        x: (loc[2 * k + 1] + 0.5) * stride - 0.5,
                        weight: wts[k],
                    });
                }
            }
        }
        Ok(points)
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub seg_logits: Tensor,
    pub boundary_logits: Tensor,
    pub direction_logits: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampledPoint {
    pub head: usize,
    pub level: usize,
    pub y: f64,
    pub x: f64,
    pub weight: f64,
}
