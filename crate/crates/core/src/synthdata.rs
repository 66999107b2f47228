//! Procedural image/caption pairs: one colored shape per image.
//!
//! There are 4 shapes x 8 colors x 3 sizes x 4 quadrants = 384 distinct
//! scenes. A per-sample seed jitters the shape position by up to two pixels;
//! train samples use even seeds and validation samples odd ones, so the two
//! splits never share a [`SceneSpec`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{DreamError, Result};
use crate::rng::{self, tag};

pub const NUM_SCENES: usize = 384;
pub const CAPTION_LEN: usize = 8;
pub const DEFAULT_SIDE: usize = 32;
pub const BACKGROUND: [f32; 3] = [-1.0, -1.0, -1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Orange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [Self::Circle, Self::Square, Self::Triangle, Self::Cross];
    pub fn word(self) -> &'static str {
        match self {
            Self::Circle => "circle",
            Self::Square => "square",
            Self::Triangle => "triangle",
            Self::Cross => "cross",
        }
    }
}

impl ColorName {
    pub const ALL: [ColorName; 8] = [
        Self::Red,
        Self::Green,
        Self::Blue,
        Self::Yellow,
        Self::Cyan,
        Self::Magenta,
        Self::White,
        Self::Orange,
    ];
    pub fn word(self) -> &'static str {
        match self {
            Self::Red => "red",
            Self::Green => "green",
            Self::Blue => "blue",
            Self::Yellow => "yellow",
            Self::Cyan => "cyan",
            Self::Magenta => "magenta",
            Self::White => "white",
            Self::Orange => "orange",
        }
    }
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Self::Red => [1.0, -1.0, -1.0],
            Self::Green => [-1.0, 1.0, -1.0],
            Self::Blue => [-1.0, -1.0, 1.0],
            Self::Yellow => [1.0, 1.0, -1.0],
            Self::Cyan => [-1.0, 1.0, 1.0],
            Self::Magenta => [1.0, -1.0, 1.0],
            Self::White => [1.0, 1.0, 1.0],
            Self::Orange => [1.0, 0.0, -1.0],
        }
    }
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [Self::Small, Self::Medium, Self::Large];
    pub fn word(self) -> &'static str {
        match self {
            Self::Small => "small",
            Self::Medium => "medium",
            Self::Large => "large",
        }
    }
    /// Half extent in pixels on a 32-pixel canvas.
    fn half_extent(self) -> f64 {
        match self {
            Self::Small => 3.0,
            Self::Medium => 5.0,
            Self::Large => 7.0,
        }
    }
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Self::TopLeft,
        Self::TopRight,
        Self::BottomLeft,
        Self::BottomRight,
    ];
    pub fn word(self) -> &'static str {
        match self {
            Self::TopLeft => "TL",
            Self::TopRight => "TR",
            Self::BottomLeft => "BL",
            Self::BottomRight => "BR",
        }
    }
    pub fn mirrored(self) -> Self {
        match self {
            Self::TopLeft => Self::TopRight,
            Self::TopRight => Self::TopLeft,
            Self::BottomLeft => Self::BottomRight,
            Self::BottomRight => Self::BottomLeft,
        }
    }
    /// Center on a 32-pixel canvas as `(x, y)`.
    fn center(self) -> (f64, f64) {
        match self {
            Self::TopLeft => (8.0, 8.0),
            Self::TopRight => (24.0, 8.0),
            Self::BottomLeft => (8.0, 24.0),
            Self::BottomRight => (24.0, 24.0),
        }
    }
}

/// One scene: attributes plus the jitter seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: ShapeKind,
    pub color: ColorName,
    pub size: SizeClass,
    pub quadrant: Quadrant,
    pub seed: u64,
}

impl SceneSpec {
    /// Dense index in `0..384` of the attribute tuple (seed ignored).
    pub fn scene_index(&self) -> usize {
        let s = ShapeKind::ALL.iter().position(|&x| x == self.shape).unwrap();
        let c = ColorName::ALL.iter().position(|&x| x == self.color).unwrap();
        let z = SizeClass::ALL.iter().position(|&x| x == self.size).unwrap();
        let q = Quadrant::ALL.iter().position(|&x| x == self.quadrant).unwrap();
        ((s * 8 + c) * 3 + z) * 4 + q
    }

    pub fn from_scene_index(index: usize, seed: u64) -> Self {
        assert!(index < NUM_SCENES);
        Self {
            shape: ShapeKind::ALL[index / 96],
            color: ColorName::ALL[(index / 12) % 8],
            size: SizeClass::ALL[(index / 4) % 3],
            quadrant: Quadrant::ALL[index % 4],
            seed,
        }
    }

    pub fn all() -> impl Iterator<Item = SceneSpec> {
        (0..NUM_SCENES).map(|i| Self::from_scene_index(i, 0))
    }

    pub fn shape_id(&self) -> usize {
        ShapeKind::ALL.iter().position(|&x| x == self.shape).unwrap()
    }

    /// Pixel offset `(dx, dy)` in `[-2, 2]` on a 32-pixel canvas.
    pub fn jitter(&self) -> (i32, i32) {
        if self.seed == 0 {
            return (0, 0);
        }
        let h = rng::mix(self.seed, &[0x6a17]);
        ((h % 5) as i32 - 2, ((h / 5) % 5) as i32 - 2)
    }

    /// Center of the shape in pixel coordinates of a `side`-pixel canvas.
    pub fn center(&self, side: usize) -> (f64, f64) {
        let k = side as f64 / 32.0;
        let (cx, cy) = self.quadrant.center();
        let (dx, dy) = self.jitter();
        ((cx + dx as f64) * k, (cy + dy as f64) * k)
    }

    pub fn half_extent(&self, side: usize) -> f64 {
        self.size.half_extent() * side as f64 / 32.0
    }

    /// Whether the point `(u, v)` relative to the shape center is covered.
    pub fn covers(&self, u: f64, v: f64, side: usize) -> bool {
        let h = self.half_extent(side);
        match self.shape {
            ShapeKind::Circle => u * u + v * v <= h * h,
            ShapeKind::Square => u.abs() <= h && v.abs() <= h,
            ShapeKind::Triangle => v >= -h && v <= h && u.abs() <= (v + h) / 2.0,
            ShapeKind::Cross => {
                let t = h / 3.0;
                (u.abs() <= t && v.abs() <= h) || (v.abs() <= t && u.abs() <= h)
            }
        }
    }

    /// Horizontal mirror image of the scene.
    pub fn mirrored(&self) -> Self {
        Self {
            quadrant: self.quadrant.mirrored(),
            ..*self
        }
    }
}

/// Caption token ids.
pub mod vocab {
    pub const PAD: u16 = 0;
    pub const NULL: u16 = 1;
    pub const A: u16 = 2;
    pub const AT: u16 = 3;
    pub const SHAPE0: u16 = 4;
    pub const COLOR0: u16 = 8;
    pub const SIZE0: u16 = 16;
    pub const QUADRANT0: u16 = 19;
    pub const SIZE: usize = 23;
}

/// Fixed-length caption: `a <size> <color> <shape> at <quadrant> <pad> <pad>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CaptionTokens(pub [u16; CAPTION_LEN]);

impl CaptionTokens {
    /// The prompt used for unconditional (guidance-free) generation.
    pub fn null() -> Self {
        let mut t = [vocab::PAD; CAPTION_LEN];
        t[0] = vocab::NULL;
        Self(t)
    }

    pub fn is_null(&self) -> bool {
        self.0.contains(&vocab::NULL)
    }

    pub fn tokens(&self) -> &[u16; CAPTION_LEN] {
        &self.0
    }

    pub fn text(&self) -> String {
        self.0
            .iter()
            .filter(|&&t| t != vocab::PAD)
            .map(|&t| word_of(t).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn word_of(token: u16) -> Option<&'static str> {
    use vocab::*;
    match token {
        PAD => Some("<pad>"),
        NULL => Some("<null>"),
        A => Some("a"),
        AT => Some("at"),
        t if (SHAPE0..SHAPE0 + 4).contains(&t) => Some(ShapeKind::ALL[(t - SHAPE0) as usize].word()),
        t if (COLOR0..COLOR0 + 8).contains(&t) => Some(ColorName::ALL[(t - COLOR0) as usize].word()),
        t if (SIZE0..SIZE0 + 3).contains(&t) => Some(SizeClass::ALL[(t - SIZE0) as usize].word()),
        t if (QUADRANT0..QUADRANT0 + 4).contains(&t) => {
            Some(Quadrant::ALL[(t - QUADRANT0) as usize].word())
        }
        _ => None,
    }
}

pub fn caption_of(spec: &SceneSpec) -> CaptionTokens {
    let s = ShapeKind::ALL.iter().position(|&x| x == spec.shape).unwrap() as u16;
    let c = ColorName::ALL.iter().position(|&x| x == spec.color).unwrap() as u16;
    let z = SizeClass::ALL.iter().position(|&x| x == spec.size).unwrap() as u16;
    let q = Quadrant::ALL.iter().position(|&x| x == spec.quadrant).unwrap() as u16;
    CaptionTokens([
        vocab::A,
        vocab::SIZE0 + z,
        vocab::COLOR0 + c,
        vocab::SHAPE0 + s,
        vocab::AT,
        vocab::QUADRANT0 + q,
        vocab::PAD,
        vocab::PAD,
    ])
}

/// Inverse of [`caption_of`]; the returned spec has seed 0.
pub fn spec_of(caption: &CaptionTokens) -> Result<SceneSpec> {
    use vocab::*;
    let t = caption.0;
    let in_range = |tok: u16, lo: u16, n: u16| -> Result<usize> {
        if (lo..lo + n).contains(&tok) {
            Ok((tok - lo) as usize)
        } else {
            Err(DreamError::UnknownToken(tok))
        }
    };
    if let Some(&bad) = t.iter().find(|&&x| x == NULL || x as usize >= SIZE) {
        return Err(DreamError::UnknownToken(bad));
    }
    if t[0] != A || t[4] != AT || t[6] != PAD || t[7] != PAD {
        return Err(DreamError::Input(format!(
            "malformed caption {:?}",
            caption.0
        )));
    }
    Ok(SceneSpec {
        size: SizeClass::ALL[in_range(t[1], SIZE0, 3)?],
        color: ColorName::ALL[in_range(t[2], COLOR0, 8)?],
        shape: ShapeKind::ALL[in_range(t[3], SHAPE0, 4)?],
        quadrant: Quadrant::ALL[in_range(t[5], QUADRANT0, 4)?],
        seed: 0,
    })
}

/// Parses whitespace-separated attribute words such as `"red circle large TL"`.
/// Word order is free; fillers `a`/`at` are ignored; each attribute must
/// appear exactly once.
pub fn parse_prompt(text: &str) -> Result<CaptionTokens> {
    let mut shape = None;
    let mut color = None;
    let mut size = None;
    let mut quadrant = None;
    fn set<T>(slot: &mut Option<T>, v: T, word: &str) -> Result<()> {
        if slot.replace(v).is_some() {
            return Err(DreamError::Input(format!("attribute repeated at `{word}`")));
        }
        Ok(())
    }
    for word in text.split_whitespace() {
        if word == "a" || word == "at" {
            continue;
        }
        if let Some(&s) = ShapeKind::ALL.iter().find(|s| s.word() == word) {
            set(&mut shape, s, word)?;
        } else if let Some(&c) = ColorName::ALL.iter().find(|c| c.word() == word) {
            set(&mut color, c, word)?;
        } else if let Some(&z) = SizeClass::ALL.iter().find(|z| z.word() == word) {
            set(&mut size, z, word)?;
        } else if let Some(&q) = Quadrant::ALL
            .iter()
            .find(|q| q.word().eq_ignore_ascii_case(word))
        {
            set(&mut quadrant, q, word)?;
        } else {
            return Err(DreamError::Input(format!("unknown prompt word `{word}`")));
        }
    }
    let missing = |what: &str| DreamError::Input(format!("prompt is missing a {what}"));
    let spec = SceneSpec {
        shape: shape.ok_or_else(|| missing("shape"))?,
        color: color.ok_or_else(|| missing("color"))?,
        size: size.ok_or_else(|| missing("size"))?,
        quadrant: quadrant.ok_or_else(|| missing("quadrant"))?,
        seed: 0,
    };
    Ok(caption_of(&spec))
}

/// `side x side x 3` image, row-major HWC, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub side: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn filled(side: usize, rgb: [f32; 3]) -> Self {
        let mut pixels = Vec::with_capacity(side * side * 3);
        for _ in 0..side * side {
            pixels.extend_from_slice(&rgb);
        }
        Self { side, pixels }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.side + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn flipped_horizontally(&self) -> Self {
        let s = self.side;
        let mut pixels = vec![0.0; self.pixels.len()];
        for y in 0..s {
            for x in 0..s {
                let src = (y * s + x) * 3;
                let dst = (y * s + (s - 1 - x)) * 3;
                pixels[dst..dst + 3].copy_from_slice(&self.pixels[src..src + 3]);
            }
        }
        Self { side: s, pixels }
    }

    /// Binary PPM (P6), mapping `[-1, 1]` to `0..=255`.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.side, self.side).into_bytes();
        out.extend(self.pixels.iter().map(|&v| {
            let q = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round();
            q as u8
        }));
        out
    }
}

fn check_side(side: usize) -> Result<()> {
    if side == 0 || !side.is_multiple_of(4) {
        return Err(DreamError::Input(format!(
            "image side {side} must be a positive multiple of 4"
        )));
    }
    Ok(())
}

/// Hard-edged rasterization of the scene over the constant background.
pub fn render_scene(spec: &SceneSpec, side: usize) -> Result<Image> {
    check_side(side)?;
    let mut img = Image::filled(side, BACKGROUND);
    let (cx, cy) = spec.center(side);
    let rgb = spec.color.rgb();
    for y in 0..side {
        for x in 0..side {
            let u = x as f64 + 0.5 - cx;
            let v = y as f64 + 0.5 - cy;
            if spec.covers(u, v, side) {
                let o = (y * side + x) * 3;
                img.pixels[o..o + 3].copy_from_slice(&rgb);
            }
        }
    }
    Ok(img)
}

pub fn render_background(side: usize) -> Result<Image> {
    check_side(side)?;
    Ok(Image::filled(side, BACKGROUND))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn bit(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub spec: SceneSpec,
    pub image: Image,
    pub caption: CaptionTokens,
}

/// Spec of item `index` of a split. Scenes are drawn as shuffled blocks of
/// all 384 attribute tuples so frequencies stay balanced.
pub fn spec_at(seed: u64, split: Split, index: u64) -> SceneSpec {
    let block = index / NUM_SCENES as u64;
    let mut order: Vec<usize> = (0..NUM_SCENES).collect();
    order.shuffle(&mut rng::substream(seed, &[tag::DATA, split.bit(), block]));
    let scene = order[(index % NUM_SCENES as u64) as usize];
    let jitter_key: u64 = rng::substream(seed, &[tag::DATA, split.bit(), block, index]).gen();
    // Parity of the seed encodes the split, so the splits are disjoint.
    let spec_seed = ((jitter_key >> 2).max(1) << 1) | split.bit();
    SceneSpec::from_scene_index(scene, spec_seed)
}

pub fn sample_at(seed: u64, split: Split, index: u64, side: usize) -> Result<Sample> {
    let spec = spec_at(seed, split, index);
    Ok(Sample {
        image: render_scene(&spec, side)?,
        caption: caption_of(&spec),
        spec,
    })
}

/// The first `n` samples of a split.
pub fn dataset(
    seed: u64,
    n: usize,
    split: Split,
    side: usize,
) -> impl Iterator<Item = Result<Sample>> {
    (0..n as u64).map(move |i| sample_at(seed, split, i, side))
}

const CACHE_MAGIC: &[u8; 4] = b"DRM1";
const CACHE_VERSION: u32 = 1;

/// Writes a split cache: header, then all f32 images, then all u16 captions.
pub fn write_cache(path: &Path, samples: &[Sample]) -> Result<()> {
    let side = samples.first().map_or(DEFAULT_SIDE, |s| s.image.side);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&(samples.len() as u32).to_le_bytes())?;
    w.write_all(&(side as u32).to_le_bytes())?;
    for s in samples {
        if s.image.side != side {
            return Err(DreamError::Input("mixed image sides in cache".into()));
        }
        for &v in &s.image.pixels {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for s in samples {
        for &t in &s.caption.0 {
            w.write_all(&t.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a split cache back as `(image, caption)` pairs.
pub fn read_cache(path: &Path) -> Result<Vec<(Image, CaptionTokens)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let bad = |m: &str| DreamError::Input(format!("cache {}: {m}", path.display()));
    if buf.len() < 16 || &buf[0..4] != CACHE_MAGIC {
        return Err(bad("bad header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    if u32_at(4) != CACHE_VERSION {
        return Err(bad("unsupported version"));
    }
    let count = u32_at(8) as usize;
    let side = u32_at(12) as usize;
    let img_len = side * side * 3;
    let need = 16 + count * img_len * 4 + count * CAPTION_LEN * 2;
    if buf.len() != need {
        return Err(bad("length does not match header"));
    }
    let mut out = Vec::with_capacity(count);
    let cap_base = 16 + count * img_len * 4;
    for i in 0..count {
        let o = 16 + i * img_len * 4;
        let pixels = buf[o..o + img_len * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let co = cap_base + i * CAPTION_LEN * 2;
        let mut tokens = [0u16; CAPTION_LEN];
        for (k, t) in tokens.iter_mut().enumerate() {
            *t = u16::from_le_bytes([buf[co + 2 * k], buf[co + 2 * k + 1]]);
        }
        out.push((Image { side, pixels }, CaptionTokens(tokens)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_fits_and_null_is_never_emitted() {
        assert!(vocab::SIZE <= 64);
        for s in SceneSpec::all() {
            assert!(!caption_of(&s).is_null());
        }
    }

    #[test]
    fn caption_round_trip_over_all_scenes() {
        let mut seen = std::collections::HashSet::new();
        for s in SceneSpec::all() {
            let c = caption_of(&s);
            assert_eq!(spec_of(&c).unwrap(), s);
            assert!(seen.insert(c));
        }
        assert_eq!(seen.len(), NUM_SCENES);
    }

    #[test]
    fn color_change_touches_one_slot() {
        let a = SceneSpec::from_scene_index(0, 0);
        let b = SceneSpec {
            color: ColorName::Cyan,
            ..a
        };
        let (ca, cb) = (caption_of(&a), caption_of(&b));
        let diff = ca.0.iter().zip(cb.0.iter()).filter(|(x, y)| x != y).count();
        assert_eq!(diff, 1);
    }

    #[test]
    fn null_caption_is_rejected() {
        assert!(matches!(
            spec_of(&CaptionTokens::null()),
            Err(DreamError::UnknownToken(vocab::NULL))
        ));
        let mut c = caption_of(&SceneSpec::from_scene_index(5, 0));
        c.0[3] = 60;
        assert!(spec_of(&c).is_err());
    }

    #[test]
    fn prompt_parsing() {
        let c = parse_prompt("red circle large TL").unwrap();
        let s = spec_of(&c).unwrap();
        assert_eq!(s.color, ColorName::Red);
        assert_eq!(s.shape, ShapeKind::Circle);
        assert_eq!(s.size, SizeClass::Large);
        assert_eq!(s.quadrant, Quadrant::TopLeft);
        assert_eq!(parse_prompt(&c.text()).unwrap(), c);
        assert!(parse_prompt("red circle large").is_err());
        assert!(parse_prompt("red circle large TL purple").is_err());
        assert!(parse_prompt("red red circle large TL").is_err());
    }

    #[test]
    fn rendering_is_deterministic_and_bounded() {
        let s = spec_at(3, Split::Train, 17);
        let a = render_scene(&s, 32).unwrap();
        let b = render_scene(&s, 32).unwrap();
        assert_eq!(a, b);
        assert!(a.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(render_scene(&s, 30).is_err());
    }

    #[test]
    fn background_only_image_is_constant() {
        let img = render_background(32).unwrap();
        assert!(img.pixels.chunks(3).all(|p| p == BACKGROUND));
    }

    #[test]
    fn flip_matches_mirrored_spec() {
        // Zero jitter keeps the mirror exact on the pixel grid.
        for i in [0, 101, 222, 383] {
            let s = SceneSpec::from_scene_index(i, 0);
            let img = render_scene(&s, 32).unwrap();
            let m = render_scene(&s.mirrored(), 32).unwrap();
            assert_eq!(img.flipped_horizontally(), m);
        }
    }

    #[test]
    fn ppm_header() {
        let img = render_background(8).unwrap();
        let p = img.to_ppm();
        assert!(p.starts_with(b"P6\n8 8\n255\n"));
        assert_eq!(p.len(), 11 + 8 * 8 * 3);
    }
}
