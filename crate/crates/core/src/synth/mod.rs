//! Procedural toy vehicles with pixel-exact part masks.

mod corpus;
mod render;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use corpus::{generate_corpus, CorpusConfig, Dataset, Sample, SampleRecord, Split};

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use render::{draw_face, draw_side, Body, Canvas, Rgb};

pub const IMAGE_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Viewpoint {
    Left,
    Right,
    Front,
    Back,
    FrontLeft,
    FrontRight,
    BackLeft,
    BackRight,
}

impl Viewpoint {
    pub const ALL: [Viewpoint; 8] = [
        Viewpoint::Left,
        Viewpoint::Right,
        Viewpoint::Front,
        Viewpoint::Back,
        Viewpoint::FrontLeft,
        Viewpoint::FrontRight,
        Viewpoint::BackLeft,
        Viewpoint::BackRight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Viewpoint::Left => "left",
            Viewpoint::Right => "right",
            Viewpoint::Front => "front",
            Viewpoint::Back => "back",
            Viewpoint::FrontLeft => "front-left",
            Viewpoint::FrontRight => "front-right",
            Viewpoint::BackLeft => "back-left",
            Viewpoint::BackRight => "back-right",
        }
    }

    /// Whether the vehicle's right flank faces the camera.
    pub fn shows_right(self) -> bool {
        matches!(
            self,
            Viewpoint::Right | Viewpoint::FrontRight | Viewpoint::BackRight
        )
    }

    pub fn shows_left(self) -> bool {
        matches!(
            self,
            Viewpoint::Left | Viewpoint::FrontLeft | Viewpoint::BackLeft
        )
    }
}

impl fmt::Display for Viewpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Viewpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Viewpoint::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown viewpoint `{s}`")))
    }
}

/// Parses a view mix such as `all`, `left,right` or `left:2,front:1` into the
/// per-identity viewpoint cycle.
pub fn parse_view_mix(spec: &str) -> Result<Vec<Viewpoint>> {
    if spec.trim() == "all" {
        return Ok(Viewpoint::ALL.to_vec());
    }
    let mut out = Vec::new();
    for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
        let (name, count) = match part.split_once(':') {
            Some((n, c)) => (
                n,
                c.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad view count in `{part}`")))?,
            ),
            None => (part, 1),
        };
        let v: Viewpoint = name.parse()?;
        out.extend(std::iter::repeat(v).take(count));
    }
    if out.is_empty() {
        return Err(Error::Config("empty view mix".into()));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Archetype {
    Sedan,
    Suv,
    Van,
}

/// Everything that stays fixed for one vehicle across viewpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub identity: u32,
    pub archetype: Archetype,
    pub color: Rgb,
    pub length: f64,
    pub height: f64,
}

impl IdentitySpec {
    pub fn from_seed(identity: u32, corpus_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(corpus_seed ^ (identity as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let archetype = match identity % 3 {
            0 => Archetype::Sedan,
            1 => Archetype::Suv,
            _ => Archetype::Van,
        };
        let hue = rng.gen_range(0.0..1.0);
        let sat = rng.gen_range(0.35..0.9);
        let val = rng.gen_range(0.45..0.95);
        IdentitySpec {
            identity,
            archetype,
            color: hsv(hue, sat, val),
            length: rng.gen_range(0.9..1.04),
            height: rng.gen_range(0.9..1.1),
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> Rgb {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub identity: IdentitySpec,
    pub viewpoint: Viewpoint,
    pub scale: f64,
    pub jitter_seed: u64,
}

impl VehicleSpec {
    /// Draws a scale for the sample from its jitter seed.
    pub fn new(identity: IdentitySpec, viewpoint: Viewpoint, jitter_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);
        VehicleSpec {
            identity,
            viewpoint,
            scale: rng.gen_range(0.86..1.0),
            jitter_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image: Image,
    pub mask: LabelMap,
    pub identity: u32,
    pub viewpoint: Viewpoint,
}

struct Proportions {
    len: f64,
    hl: f64,
    hc: f64,
    hood: f64,
    trunk: f64,
    slant_front: f64,
    slant_back: f64,
    roof_ratio: f64,
    wheel_r: f64,
}

fn proportions(a: Archetype) -> Proportions {
    match a {
        Archetype::Sedan => Proportions {
            len: 54.0,
            hl: 10.0,
            hc: 10.0,
            hood: 0.27,
            trunk: 0.17,
            slant_front: 0.55,
            slant_back: 0.4,
            roof_ratio: 0.72,
            wheel_r: 4.6,
        },
        Archetype::Suv => Proportions {
            len: 52.0,
            hl: 12.0,
            hc: 11.0,
            hood: 0.22,
            trunk: 0.07,
            slant_front: 0.4,
            slant_back: 0.12,
            roof_ratio: 0.8,
            wheel_r: 5.4,
        },
        Archetype::Van => Proportions {
            len: 56.0,
            hl: 13.0,
            hc: 13.0,
            hood: 0.13,
            trunk: 0.03,
            slant_front: 0.3,
            slant_back: 0.05,
            roof_ratio: 0.9,
            wheel_r: 5.0,
        },
    }
}

/// Renders one sample. Deterministic in `spec`.
pub fn generate(spec: &VehicleSpec) -> LabeledSample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.jitter_seed.wrapping_add(0x5eed));
    let id = &spec.identity;
    let p = proportions(id.archetype);
    let s = spec.scale;
    let n = IMAGE_SIZE as i64;

    let tone = rng.gen_range(0.3..0.75);
    let tint: Rgb = [
        rng.gen_range(-0.05..0.05),
        rng.gen_range(-0.05..0.05),
        rng.gen_range(-0.05..0.05),
    ];
    let horizon = rng.gen_range(34..44) as usize;
    let background = |y: usize, _x: usize| -> Rgb {
        let k = if y >= horizon { 0.75 } else { 1.0 - 0.004 * y as f64 };
        [
            (tone + tint[0]) * k,
            (tone + tint[1]) * k,
            (tone + tint[2]) * k,
        ]
    };
    let mut cv = Canvas::new(IMAGE_SIZE, IMAGE_SIZE, background);

    let dx = rng.gen_range(-3..=3);
    let dy = rng.gen_range(-2..=2);
    let body = Body {
        yb: 50 + dy,
        hl: (p.hl * id.height * s).round() as i64,
        hc: (p.hc * id.height * s).round() as i64,
        wheel_r: p.wheel_r * s,
        hood: p.hood,
        trunk: p.trunk,
        slant_front: p.slant_front,
        slant_back: p.slant_back,
        roof_ratio: p.roof_ratio,
        color: id.color,
    };
    let len = (p.len * id.length * s).round() as i64;
    let face = (len as f64 * 0.7).round() as i64;

    // Everything is drawn for the left flank (front at image-left) and
    // mirrored for right-flank views.
    use Viewpoint::*;
    match spec.viewpoint {
        Left | Right => {
            let x0 = (n - len) / 2 + dx;
            draw_side(&mut cv, &body, x0, len, (true, true));
        }
        Front | Back => {
            let x0 = (n - face) / 2 + dx;
            draw_face(&mut cv, &body, x0, face, spec.viewpoint == Front, true);
        }
        FrontLeft | FrontRight => {
            let (fw, sl) = ((face as f64 * 0.5).round() as i64, (len as f64 * 0.72).round() as i64);
            let x0 = (n - fw - sl) / 2 + dx;
            draw_side(&mut cv, &body, x0 + fw, sl, (false, true));
            draw_face(&mut cv, &body, x0, fw, true, false);
        }
        BackLeft | BackRight => {
            let (fw, sl) = ((face as f64 * 0.5).round() as i64, (len as f64 * 0.72).round() as i64);
            let x0 = (n - fw - sl) / 2 + dx;
            draw_side(&mut cv, &body, x0, sl, (true, false));
            draw_face(&mut cv, &body, x0 + sl, fw, false, false);
        }
    }
    if spec.viewpoint.shows_right() {
        cv.mirror();
    }

    let gain = rng.gen_range(0.93..1.07);
    for v in cv.img.data.iter_mut() {
        *v = (*v * gain + rng.gen_range(-0.025..0.025)).clamp(0.0, 1.0);
    }
    // Quantize so in-memory samples equal their on-disk encoding.
    let image = Image::from_bytes(IMAGE_SIZE, IMAGE_SIZE, &cv.img.to_bytes());
    LabeledSample {
        image,
        mask: cv.labels,
        identity: id.identity,
        viewpoint: spec.viewpoint,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::{side_of, Side};

    #[test]
    fn view_mix_parsing() {
        assert_eq!(parse_view_mix("all").unwrap().len(), 8);
        assert_eq!(
            parse_view_mix("left:2,front").unwrap(),
            vec![Viewpoint::Left, Viewpoint::Left, Viewpoint::Front]
        );
        assert!(parse_view_mix("sideways").is_err());
    }

    #[test]
    fn left_view_has_no_right_parts() {
        let spec = VehicleSpec::new(IdentitySpec::from_seed(4, 1), Viewpoint::Left, 9);
        let s = generate(&spec);
        for c in s.mask.present_classes() {
            assert_ne!(side_of(c), Side::Right);
        }
    }
}
