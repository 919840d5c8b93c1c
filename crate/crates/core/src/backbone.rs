//! Toy vision-language backbone.
//!
//! Images are cut into non-overlapping patches and linearly embedded;
//! neighbouring patch tokens are regrouped by pixel unshuffle (4× fewer
//! tokens at factor 2) and projected to the language width. The image
//! tokens replace `<img>` placeholders in the instruction, learned absolute
//! positions are added, and a stack of pre-norm transformer layers mixes
//! the sequence. The hidden state of a designated middle layer is the fused
//! context handed to the action expert.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttnKind, AttnSegment, Graph, Var};
use crate::nn;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const PAD_TOKEN: u32 = 0;
pub const BOS_TOKEN: u32 = 1;
/// Reserved image placeholder id.
pub const IMG_TOKEN: u32 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d_z: usize,
    pub layers: usize,
    /// 1-based index of the layer whose output is the fused context.
    pub extract_layer: usize,
    pub patch_size: usize,
    pub unshuffle_factor: usize,
    pub heads: usize,
    pub vocab: usize,
    /// Width of a single patch embedding before unshuffle.
    pub d_patch: usize,
    pub image_size: usize,
    pub views: usize,
    pub mlp_ratio: usize,
    pub max_tokens: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_z: 128,
            layers: 6,
            extract_layer: 4,
            patch_size: 4,
            unshuffle_factor: 2,
            heads: 4,
            vocab: 64,
            d_patch: 32,
            image_size: 32,
            views: 2,
            mlp_ratio: 4,
            max_tokens: 128,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.extract_layer == 0 || self.extract_layer > self.layers {
            return cfg(format!(
                "extraction layer {} must lie in 1..={}",
                self.extract_layer, self.layers
            ));
        }
        let cell = self.patch_size * self.unshuffle_factor;
        if cell == 0 || !self.image_size.is_multiple_of(cell) {
            return cfg(format!(
                "image size {} not divisible by patch {} x unshuffle {}",
                self.image_size, self.patch_size, self.unshuffle_factor
            ));
        }
        if self.heads == 0 || !self.d_z.is_multiple_of(self.heads) {
            return cfg(format!("d_z {} not divisible by {} heads", self.d_z, self.heads));
        }
        if self.vocab <= IMG_TOKEN as usize || self.views == 0 {
            return cfg("vocabulary too small or no views".into());
        }
        Ok(())
    }

    pub fn patch_grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Image tokens per view after unshuffle.
    pub fn tokens_per_view(&self) -> usize {
        let g = self.patch_grid() / self.unshuffle_factor;
        g * g
    }
}

/// H×W×3 image, row-major, channels last, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Image {
            height,
            width,
            data: (0..height * width).flat_map(|_| rgb).collect(),
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }
}

/// Multi-view observation at one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    pub views: Vec<Image>,
}

impl ObservationSet {
    pub fn new(views: Vec<Image>) -> Result<Self> {
        if let Some(first) = views.first() {
            if views.iter().any(|v| v.height != first.height || v.width != first.width) {
                return Err(Error::InvalidArgument("views differ in size".into()));
            }
        }
        Ok(ObservationSet { views })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub tokens: Vec<u32>,
}

impl Instruction {
    pub fn placeholder_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == IMG_TOKEN).count()
    }

    pub fn validate(&self, vocab: usize, views: usize) -> Result<()> {
        if let Some(t) = self.tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::InvalidArgument(format!(
                "token id {t} outside vocabulary of {vocab}"
            )));
        }
        if self.placeholder_count() != views {
            return Err(Error::InvalidArgument(format!(
                "instruction has {} image placeholders for {views} views",
                self.placeholder_count()
            )));
        }
        Ok(())
    }
}

/// Hidden states of one sample, `T × d_z`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedContext<T = f32> {
    pub tokens: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenRole {
    Text,
    Image { view: usize, index: usize },
}

/// Head-averaged self-attention of one layer for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub layer: usize,
    pub weights: Tensor<f32>,
    pub roles: Vec<TokenRole>,
}

/// Position of each fused token: a text id or an image token of a view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Text(u32),
    Image { view: usize, index: usize },
}

impl Slot {
    pub fn role(self) -> TokenRole {
        match self {
            Slot::Text(_) => TokenRole::Text,
            Slot::Image { view, index } => TokenRole::Image { view, index },
        }
    }
}

/// Replaces the i-th placeholder with the `tokens_per_view[i]` image tokens
/// of view i, keeping all other ids as text.
pub fn fused_layout(instr: &Instruction, tokens_per_view: &[usize]) -> Result<Vec<Slot>> {
    if instr.placeholder_count() != tokens_per_view.len() {
        return Err(Error::InvalidArgument(format!(
            "{} placeholders but {} views",
            instr.placeholder_count(),
            tokens_per_view.len()
        )));
    }
    let mut out = Vec::new();
    let mut view = 0;
    for &t in &instr.tokens {
        if t == IMG_TOKEN {
            out.extend((0..tokens_per_view[view]).map(|index| Slot::Image { view, index }));
            view += 1;
        } else {
            out.push(Slot::Text(t));
        }
    }
    Ok(out)
}

/// Builds the fused token sequence from per-view image tokens and the text
/// embedding table.
pub fn fuse_sequence<T: Scalar>(
    instr: &Instruction,
    image_tokens: &[Tensor<T>],
    text_table: &Tensor<T>,
) -> Result<Tensor<T>> {
    let counts: Vec<usize> = image_tokens.iter().map(Tensor::rows).collect();
    let layout = fused_layout(instr, &counts)?;
    let d = text_table.cols();
    let mut data = Vec::with_capacity(layout.len() * d);
    for slot in layout.iter() {
        match *slot {
            Slot::Text(t) => {
                if t as usize >= text_table.rows() {
                    return Err(Error::InvalidArgument(format!("token {t} outside table")));
                }
                data.extend_from_slice(text_table.row(t as usize));
            }
            Slot::Image { view, index } => {
                let tokens = &image_tokens[view];
                if tokens.cols() != d {
                    return Err(crate::error::shape_err(
                        "fuse_sequence",
                        tokens.shape(),
                        text_table.shape(),
                    ));
                }
                data.extend_from_slice(tokens.row(index));
            }
        }
    }
    Tensor::new(vec![layout.len(), d], data)
}

/// Flattened non-overlapping patches in row-major patch order; each row is
/// the patch's pixels in row-major order with RGB innermost.
pub fn extract_patches(image: &Image, patch: usize) -> Result<Tensor<f32>> {
    if patch == 0 || !image.height.is_multiple_of(patch) || !image.width.is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "image {}x{} not divisible into {patch}x{patch} patches",
            image.height, image.width
        )));
    }
    let (gh, gw) = (image.height / patch, image.width / patch);
    let row_len = patch * patch * 3;
    let mut data = Vec::with_capacity(gh * gw * row_len);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch {
                let y = py * patch + dy;
                let o = (y * image.width + px * patch) * 3;
                data.extend_from_slice(&image.data[o..o + patch * 3]);
            }
        }
    }
    Tensor::new(vec![gh * gw, row_len], data)
}

/// Patch extraction followed by a linear projection.
pub fn patch_embed<T: Scalar>(image: &Image, patch: usize, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    nn::linear_forward(&extract_patches(image, patch)?.cast(), w, b)
}

/// Source-row order of a pixel unshuffle: output token `j` concatenates
/// input rows `idx[j·f² .. (j+1)·f²]` (its f×f block, row-major).
pub fn unshuffle_indices(grid_h: usize, grid_w: usize, f: usize) -> Result<Vec<usize>> {
    if f == 0 || !grid_h.is_multiple_of(f) || !grid_w.is_multiple_of(f) {
        return Err(Error::Config(format!(
            "token grid {grid_h}x{grid_w} not divisible by unshuffle factor {f}"
        )));
    }
    let mut idx = Vec::with_capacity(grid_h * grid_w);
    for oy in 0..grid_h / f {
        for ox in 0..grid_w / f {
            for dy in 0..f {
                for dx in 0..f {
                    idx.push((oy * f + dy) * grid_w + ox * f + dx);
                }
            }
        }
    }
    Ok(idx)
}

/// Space-to-depth regrouping of a `grid_h × grid_w` token grid.
pub fn pixel_unshuffle<T: Scalar>(tokens: &Tensor<T>, grid_h: usize, grid_w: usize, f: usize) -> Result<Tensor<T>> {
    if tokens.rows() != grid_h * grid_w {
        return Err(Error::InvalidArgument(format!(
            "{} tokens for a {grid_h}x{grid_w} grid",
            tokens.rows()
        )));
    }
    let idx = unshuffle_indices(grid_h, grid_w, f)?;
    let c = tokens.cols();
    tokens
        .select_rows(&idx)
        .reshape(&[grid_h * grid_w / (f * f), c * f * f])
}

pub fn init_backbone<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, cfg: &BackboneConfig) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_z;
    let patch_in = cfg.patch_size * cfg.patch_size * 3;
    let ff = cfg.unshuffle_factor * cfg.unshuffle_factor;
    nn::init_linear_default(store, rng, "backbone.patch", patch_in, cfg.d_patch)?;
    nn::init_linear_default(store, rng, "backbone.proj", ff * cfg.d_patch, d)?;
    store.insert_normal("backbone.tok_embed", &[cfg.vocab, d], 1.0, rng)?;
    store.insert_normal("backbone.pos_embed", &[cfg.max_tokens, d], 0.1, rng)?;
    let out_std = 1.0 / ((d as f64).sqrt() * (2.0 * cfg.layers as f64).sqrt());
    for l in 1..=cfg.layers {
        let p = format!("backbone.layers.{l}");
        nn::init_layer_norm(store, &format!("{p}.ln1"), d)?;
        nn::init_attention(store, rng, &format!("{p}.attn"), d, out_std)?;
        nn::init_layer_norm(store, &format!("{p}.ln2"), d)?;
        nn::init_mlp(store, rng, &format!("{p}.mlp"), d, d * cfg.mlp_ratio, out_std)?;
    }
    Ok(())
}

/// Backbone activations for a batch, packed sample after sample.
pub struct BackboneOutput {
    /// `layers[l-1]` is the output of layer `l`, `[Σ T_b, d_z]`.
    pub layers: Vec<Var>,
    /// Self-attention node of each computed layer.
    pub attention: Vec<Var>,
    /// Fused embedding before the first layer.
    pub embeddings: Var,
    /// `(row start, token count)` per sample.
    pub segments: Vec<(usize, usize)>,
    pub roles: Vec<Vec<TokenRole>>,
}

impl BackboneOutput {
    /// Fused context at layer `k` (1-based).
    pub fn extract_z(&self, k: usize) -> Result<Var> {
        if k == 0 || k > self.layers.len() {
            return Err(Error::Config(format!(
                "extraction layer {k} outside 1..={}",
                self.layers.len()
            )));
        }
        Ok(self.layers[k - 1])
    }
}

/// Runs layers `1..=upto` on a batch of observations and instructions.
pub fn backbone_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &BackboneConfig,
    obs: &[&ObservationSet],
    instrs: &[&Instruction],
    upto: usize,
) -> Result<BackboneOutput> {
    if obs.len() != instrs.len() || obs.is_empty() {
        return Err(Error::InvalidArgument("empty or mismatched backbone batch".into()));
    }
    if upto == 0 || upto > cfg.layers {
        return Err(Error::Config(format!("cannot run {upto} of {} layers", cfg.layers)));
    }
    let grid = cfg.patch_grid();
    let f = cfg.unshuffle_factor;
    let per_view = cfg.tokens_per_view();
    let d = cfg.d_z;

    // Patch rows for every (sample, view), then unshuffle groups.
    let mut patch_rows = Vec::new();
    let mut group_idx = Vec::new();
    let base_idx = unshuffle_indices(grid, grid, f)?;
    let mut n_views_total = 0;
    for o in obs {
        if o.views.len() != cfg.views {
            return Err(Error::InvalidArgument(format!(
                "observation has {} views, model expects {}",
                o.views.len(),
                cfg.views
            )));
        }
        for img in &o.views {
            if img.height != cfg.image_size || img.width != cfg.image_size {
                return Err(Error::Config(format!(
                    "image {}x{} does not match configured size {}",
                    img.height, img.width, cfg.image_size
                )));
            }
            let p = extract_patches(img, cfg.patch_size)?;
            let off = n_views_total * grid * grid;
            group_idx.extend(base_idx.iter().map(|i| i + off));
            patch_rows.push(p);
            n_views_total += 1;
        }
    }
    let refs: Vec<&Tensor<f32>> = patch_rows.iter().collect();
    let patches = g.input(Tensor::concat_rows(&refs)?.cast());
    let pe = nn::linear(g, store, "backbone.patch", patches)?;
    let grouped = g.group_rows(pe, group_idx, f * f)?;
    let img_tokens = nn::linear(g, store, "backbone.proj", grouped)?;

    // Text rows follow all image rows in the concatenated source.
    let n_img_rows = n_views_total * per_view;
    let mut text_ids = Vec::new();
    let mut order = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::new();
    let mut roles = Vec::new();
    let counts = vec![per_view; cfg.views];
    for (b, instr) in instrs.iter().enumerate() {
        instr.validate(cfg.vocab, cfg.views)?;
        let layout = fused_layout(instr, &counts)?;
        if layout.len() > cfg.max_tokens {
            return Err(Error::Config(format!(
                "sequence of {} tokens exceeds max_tokens {}",
                layout.len(),
                cfg.max_tokens
            )));
        }
        segments.push((order.len(), layout.len()));
        for (pos, slot) in layout.iter().enumerate() {
            match *slot {
                Slot::Text(t) => {
                    order.push(n_img_rows + text_ids.len());
                    text_ids.push(t as usize);
                }
                Slot::Image { view, index } => {
                    order.push((b * cfg.views + view) * per_view + index);
                }
            }
            positions.push(pos);
        }
        roles.push(layout.iter().map(|s| s.role()).collect());
    }
    let table = g.param_named(store, "backbone.tok_embed")?;
    let text = g.gather_rows(table, text_ids)?;
    let source = g.concat_rows(&[img_tokens, text])?;
    let fused = g.gather_rows(source, order)?;
    let pos_table = g.param_named(store, "backbone.pos_embed")?;
    let pos = g.gather_rows(pos_table, positions)?;
    let embeddings = g.add(fused, pos)?;

    let attn_segments: Vec<AttnSegment> = segments
        .iter()
        .map(|&(s, n)| AttnSegment {
            q_start: s,
            q_len: n,
            kv_start: s,
            kv_len: n,
        })
        .collect();
    let mut x = embeddings;
    let mut layers = Vec::with_capacity(upto);
    let mut attention = Vec::with_capacity(upto);
    for l in 1..=upto {
        let p = format!("backbone.layers.{l}");
        let h = nn::layer_norm_node(g, store, &format!("{p}.ln1"), x)?;
        let (a, node) = nn::attention_block(
            g,
            store,
            &format!("{p}.attn"),
            h,
            h,
            cfg.heads,
            attn_segments.clone(),
            AttnKind::Backbone,
        )?;
        x = g.add(x, a)?;
        let h = nn::layer_norm_node(g, store, &format!("{p}.ln2"), x)?;
        let m = nn::mlp(g, store, &format!("{p}.mlp"), h)?;
        x = g.add(x, m)?;
        layers.push(x);
        attention.push(node);
    }
    debug_assert_eq!(g.value(x).cols(), d);
    Ok(BackboneOutput {
        layers,
        attention,
        embeddings,
        segments,
        roles,
    })
}

/// Eager single-sample forward through all layers.
pub struct BackboneStates {
    pub embeddings: Tensor<f32>,
    pub layers: Vec<FusedContext<f32>>,
    pub attention: Vec<AttentionMap>,
}

impl BackboneStates {
    pub fn extract_z(&self, k: usize) -> Result<&FusedContext<f32>> {
        if k == 0 || k > self.layers.len() {
            return Err(Error::Config(format!(
                "extraction layer {k} outside 1..={}",
                self.layers.len()
            )));
        }
        Ok(&self.layers[k - 1])
    }
}

pub fn backbone_states(
    store: &ParamStore<f32>,
    cfg: &BackboneConfig,
    obs: &ObservationSet,
    instr: &Instruction,
    upto: usize,
) -> Result<BackboneStates> {
    let mut g = Graph::inference();
    let out = backbone_forward(&mut g, store, cfg, &[obs], &[instr], upto)?;
    let layers = out
        .layers
        .iter()
        .map(|&v| FusedContext {
            tokens: g.value(v).clone(),
        })
        .collect();
    let attention = out
        .attention
        .iter()
        .enumerate()
        .map(|(i, &v)| AttentionMap {
            layer: i + 1,
            weights: g.attention_map(v, 0).expect("attention node"),
            roles: out.roles[0].clone(),
        })
        .collect();
    Ok(BackboneStates {
        embeddings: g.value(out.embeddings).clone(),
        layers,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instr(tokens: &[u32]) -> Instruction {
        Instruction {
            tokens: tokens.to_vec(),
        }
    }

    fn test_obs(cfg: &BackboneConfig, seed: u64) -> ObservationSet {
        let mut rng = Rng::new(seed);
        let n = cfg.image_size * cfg.image_size * 3;
        ObservationSet::new(
            (0..cfg.views)
                .map(|_| {
                    Image::new(
                        cfg.image_size,
                        cfg.image_size,
                        (0..n).map(|_| rng.uniform() as f32).collect(),
                    )
                    .unwrap()
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn patch_count_and_zero_image() {
        let img = Image::filled(32, 32, [0.0; 3]);
        let p = extract_patches(&img, 4).unwrap();
        assert_eq!(p.shape(), &[64, 48]);
        let w = Tensor::<f64>::from_fn(&[48, 5], |i| i as f64 * 0.01);
        let b = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4, 0.5]);
        let t = patch_embed(&img, 4, &w, &b).unwrap();
        for r in 0..64 {
            assert_eq!(t.row(r), b.data());
        }
        assert!(matches!(
            extract_patches(&Image::filled(30, 30, [0.0; 3]), 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_patch_identity_projection_flattens_pixels() {
        let data: Vec<f32> = (0..48).map(|i| i as f32 / 48.0).collect();
        let img = Image::new(4, 4, data.clone()).unwrap();
        let eye = Tensor::<f64>::from_fn(&[48, 48], |i| if i / 48 == i % 48 { 1.0 } else { 0.0 });
        let t = patch_embed(&img, 4, &eye, &Tensor::zeros(&[48])).unwrap();
        // hand flattening: row-major pixels, RGB innermost
        let mut want = Vec::new();
        for y in 0..4 {
            for x in 0..4 {
                want.extend_from_slice(&img.pixel(y, x));
            }
        }
        assert_eq!(t.shape(), &[1, 48]);
        for (a, b) in t.data().iter().zip(want) {
            assert_eq!(*a, b as f64);
        }
    }

    #[test]
    fn unshuffle_shapes_identity_and_blocks() {
        let t = Tensor::<f64>::from_fn(&[64, 3], |i| i as f64);
        let u = pixel_unshuffle(&t, 8, 8, 2).unwrap();
        assert_eq!(u.shape(), &[16, 12]);
        assert_eq!(pixel_unshuffle(&t, 8, 8, 1).unwrap().data(), t.data());
        assert!(pixel_unshuffle(&t, 8, 8, 3).is_err());

        // 4x4 grid of markers, marker = 10*row + col
        let markers = Tensor::<f64>::from_fn(&[16, 1], |i| (10 * (i / 4) + i % 4) as f64);
        let u = pixel_unshuffle(&markers, 4, 4, 2).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let want: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(dy, dx)| (10 * (2 * oy + dy) + 2 * ox + dx) as f64)
                    .collect();
                assert_eq!(u.row(oy * 2 + ox), &want[..]);
            }
        }
    }

    #[test]
    fn fusion_lengths_and_order() {
        let table = Tensor::<f64>::from_fn(&[8, 2], |i| i as f64);
        let img = Tensor::<f64>::from_fn(&[16, 2], |i| 100.0 + i as f64);
        let seq = fuse_sequence(&instr(&[1, 3, IMG_TOKEN, 4, 5]), &[img], &table).unwrap();
        assert_eq!(seq.rows(), 20);
        let seq = fuse_sequence(&instr(&[1, 3, IMG_TOKEN, 4, 5]), &[Tensor::zeros(&[0, 2])], &table);
        assert_eq!(seq.unwrap().rows(), 4);
        let a = Tensor::<f64>::full(&[2, 2], -1.0);
        let b = Tensor::<f64>::full(&[3, 2], -2.0);
        let seq = fuse_sequence(&instr(&[IMG_TOKEN, 3, IMG_TOKEN]), &[a, b], &table).unwrap();
        let col0: Vec<f64> = (0..seq.rows()).map(|r| seq[[r, 0]]).collect();
        assert_eq!(col0, vec![-1., -1., 6., -2., -2., -2.]);
        assert!(fuse_sequence(&instr(&[1, IMG_TOKEN]), &[], &table).is_err());
    }

    #[test]
    fn backbone_shapes_and_row_stochastic_maps() {
        let cfg = BackboneConfig {
            d_z: 16,
            layers: 3,
            extract_layer: 2,
            heads: 2,
            d_patch: 8,
            ..Default::default()
        };
        let mut store = ParamStore::<f32>::new();
        init_backbone(&mut store, &mut Rng::new(0), &cfg).unwrap();
        let obs = test_obs(&cfg, 1);
        let ins = instr(&[BOS_TOKEN, IMG_TOKEN, IMG_TOKEN, 5, 6]);
        let st = backbone_states(&store, &cfg, &obs, &ins, cfg.layers).unwrap();
        let t = 5 - 2 + 2 * cfg.tokens_per_view();
        assert_eq!(st.extract_z(2).unwrap().tokens.shape(), &[t, 16]);
        assert_eq!(st.extract_z(3).unwrap(), st.layers.last().unwrap());
        assert_eq!(st.extract_z(1).unwrap(), &st.layers[0]);
        assert!(st.extract_z(4).is_err());
        for m in &st.attention {
            for r in 0..m.weights.rows() {
                let s: f32 = m.weights.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
        assert_eq!(
            st.attention[0].roles.iter().filter(|r| **r == TokenRole::Text).count(),
            3
        );
    }

    #[test]
    fn zero_residual_branches_give_identity_layers() {
        let cfg = BackboneConfig {
            d_z: 16,
            layers: 2,
            extract_layer: 1,
            heads: 2,
            d_patch: 8,
            ..Default::default()
        };
        let mut store = ParamStore::<f32>::new();
        init_backbone(&mut store, &mut Rng::new(0), &cfg).unwrap();
        for l in 1..=2 {
            for name in ["attn.o.w", "attn.o.b", "mlp.fc2.w", "mlp.fc2.b"] {
                let id = store.id(&format!("backbone.layers.{l}.{name}")).unwrap();
                store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let obs = test_obs(&cfg, 2);
        let st = backbone_states(&store, &cfg, &obs, &instr(&[IMG_TOKEN, 7, IMG_TOKEN]), 2).unwrap();
        for l in &st.layers {
            assert_eq!(l.tokens, st.embeddings);
        }
    }

    #[test]
    fn config_validation() {
        let bad = BackboneConfig {
            extract_layer: 7,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = BackboneConfig {
            image_size: 36,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(BackboneConfig::default().validate().is_ok());
        assert_eq!(BackboneConfig::default().tokens_per_view(), 16);
    }
}
