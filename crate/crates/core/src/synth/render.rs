//! Hard-edged rasterization of toy vehicles. Every paint call writes color
//! and label together, so part regions are disjoint by construction.

use crate::image::{Image, LabelMap};
use crate::ontology::*;

pub(crate) type Rgb = [f64; 3];

pub(crate) struct Canvas {
    pub img: Image,
    pub labels: LabelMap,
}

impl Canvas {
    pub fn new(h: usize, w: usize, background: impl Fn(usize, usize) -> Rgb) -> Self {
        let mut img = Image::new(h, w);
        for y in 0..h {
            for x in 0..w {
                img.set(y, x, background(y, x));
            }
        }
        Canvas {
            img,
            labels: LabelMap::new(h, w),
        }
    }

    fn put(&mut self, y: i64, x: i64, rgb: Rgb, class: ClassId) {
        if y < 0 || x < 0 || y >= self.img.h as i64 || x >= self.img.w as i64 {
            return;
        }
        self.img.set(y as usize, x as usize, rgb);
        self.labels.set(y as usize, x as usize, class as u8 + 1);
    }

    /// Inclusive integer rectangle.
    pub fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, rgb: Rgb, class: ClassId) {
        for y in y0..=y1 {
            for x in x0..=x1 {
                self.put(y, x, rgb, class);
            }
        }
    }

    /// Row-wise span painter: `span(y)` gives the inclusive x range for row `y`.
    pub fn rows(
        &mut self,
        y0: i64,
        y1: i64,
        span: impl Fn(i64) -> (i64, i64),
        rgb: Rgb,
        class: ClassId,
    ) {
        for y in y0..=y1 {
            let (a, b) = span(y);
            for x in a..=b {
                self.put(y, x, rgb, class);
            }
        }
    }

    pub fn disc(&mut self, cx: f64, cy: f64, r: f64, rgb: Rgb, class: ClassId) {
        let (y0, y1) = ((cy - r).floor() as i64, (cy + r).ceil() as i64);
        let (x0, x1) = ((cx - r).floor() as i64, (cx + r).ceil() as i64);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    self.put(y, x, rgb, class);
                }
            }
        }
    }

    /// Horizontal flip of image and labels, swapping left/right classes.
    pub fn mirror(&mut self) {
        let (h, w) = (self.img.h, self.img.w);
        let (img, lab) = (self.img.clone(), self.labels.clone());
        for y in 0..h {
            for x in 0..w {
                self.img.set(y, x, img.get(y, w - 1 - x));
                let v = lab.get(y, w - 1 - x);
                let v = if v == 0 { 0 } else { mirror_class(v as usize - 1) as u8 + 1 };
                self.labels.set(y, x, v);
            }
        }
    }
}

/// Pixel-space body dimensions for one rendering.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Body {
    /// Bottom row of the body (exclusive of wheels hanging below).
    pub yb: i64,
    /// Lower-body height in rows.
    pub hl: i64,
    /// Cabin height in rows.
    pub hc: i64,
    pub wheel_r: f64,
    /// Hood and trunk as fractions of the side length.
    pub hood: f64,
    pub trunk: f64,
    /// Windshield and rear-glass slant as fractions of the cabin height.
    pub slant_front: f64,
    pub slant_back: f64,
    /// Cabin top width relative to face width, for front/back faces.
    pub roof_ratio: f64,
    pub color: Rgb,
}

fn shade(c: Rgb, k: f64) -> Rgb {
    [c[0] * k, c[1] * k, c[2] * k]
}

const GLASS: Rgb = [0.16, 0.22, 0.32];
const TIRE: Rgb = [0.08, 0.08, 0.09];
const HUB: Rgb = [0.62, 0.62, 0.64];
const HEADLIGHT: Rgb = [1.0, 0.95, 0.55];
const TAILLIGHT: Rgb = [0.9, 0.08, 0.06];
const GRILLE: Rgb = [0.12, 0.12, 0.12];
const PLATE_BG: Rgb = [0.95, 0.95, 0.88];
const PLATE_INK: Rgb = [0.1, 0.1, 0.15];

/// Side of the vehicle with the front at image-left (the left-side view).
/// `x0` is the leftmost column, `len` the body length in columns.
pub(crate) fn draw_side(cv: &mut Canvas, b: &Body, x0: i64, len: i64, lamps: (bool, bool)) {
    let ymid = b.yb - b.hl;
    let ytop = ymid - b.hc;
    let x1 = x0 + len - 1;
    cv.rect(x0, ymid, x1, b.yb - 1, b.color, FOREGROUND);

    let xc0 = x0 as f64 + b.hood * len as f64;
    let xc1 = x1 as f64 - b.trunk * len as f64;
    let sf = b.slant_front * b.hc as f64;
    let sb = b.slant_back * b.hc as f64;
    // Cabin edges interpolate from the belt line (ymid) up to the roof (ytop).
    let edge_f = move |y: i64| xc0 + sf * (ymid - y) as f64 / b.hc as f64;
    let edge_b = move |y: i64| xc1 - sb * (ymid - y) as f64 / b.hc as f64;
    let roof = shade(b.color, 0.95);
    cv.rows(
        ytop,
        ymid - 1,
        |y| (edge_f(y).round() as i64, edge_b(y).round() as i64),
        roof,
        FOREGROUND,
    );

    let xm = ((xc0 + xc1) / 2.0).round() as i64;
    let wf = move |y: i64| ((edge_f(y) + 1.5).ceil() as i64, xm - 1);
    let wb = move |y: i64| (xm + 2, (edge_b(y) - 1.5).floor() as i64);
    cv.rows(ytop + 2, ymid - 1, wf, GLASS, LEFT_FRONT_WINDOW);
    cv.rows(ytop + 2, ymid - 1, wb, shade(GLASS, 1.15), LEFT_BACK_WINDOW);

    // Doors span exactly the bottom rows of their windows, so each door
    // touches its window along the belt line.
    let door = shade(b.color, 0.86);
    let door_lo = b.yb - 3;
    cv.rect(wf(ymid - 1).0, ymid, xm, door_lo, door, LEFT_FRONT_DOOR);
    cv.rect(xm + 1, ymid, wb(ymid - 1).1, door_lo, shade(b.color, 0.8), LEFT_BACK_DOOR);
    cv.rect(xm + 1, ymid, xm + 1, door_lo, shade(b.color, 0.45), LEFT_BACK_DOOR);
    let handle = shade(b.color, 1.25);
    cv.rect(xm - 3, ymid + 2, xm - 2, ymid + 2, handle, LEFT_FRONT_DOOR);
    cv.rect(xm + 3, ymid + 2, xm + 4, ymid + 2, handle, LEFT_BACK_DOOR);

    if lamps.0 {
        cv.rect(x0, ymid + 1, x0 + 1, ymid + 2, HEADLIGHT, FOREGROUND);
    }
    if lamps.1 {
        cv.rect(x1 - 1, ymid + 1, x1, ymid + 3, TAILLIGHT, FOREGROUND);
    }

    let yw = b.yb as f64;
    for xw in [x0 as f64 + 0.2 * len as f64, x1 as f64 + 1.0 - 0.2 * len as f64] {
        cv.disc(xw, yw, b.wheel_r, TIRE, WHEEL);
        cv.disc(xw, yw, b.wheel_r * 0.45, HUB, WHEEL);
    }
}

/// Front (`front == true`) or back face centered in `[x0, x0 + width)`.
pub(crate) fn draw_face(cv: &mut Canvas, b: &Body, x0: i64, width: i64, front: bool, wheels: bool) {
    let ymid = b.yb - b.hl;
    let ytop = ymid - b.hc;
    let x1 = x0 + width - 1;
    let cx = (x0 + x1) as f64 / 2.0;
    let half_w = width as f64 / 2.0;

    if wheels {
        let ww = (width / 8).max(2);
        cv.rect(x0 + 1, b.yb - 3, x0 + ww, b.yb + 2, TIRE, WHEEL);
        cv.rect(x1 - ww, b.yb - 3, x1 - 1, b.yb + 2, TIRE, WHEEL);
    }
    cv.rect(x0, ymid, x1, b.yb - 1, b.color, FOREGROUND);

    let half_top = half_w * b.roof_ratio;
    let edge = move |y: i64| {
        let t = (ymid - y) as f64 / b.hc as f64;
        half_w + (half_top - half_w) * t
    };
    cv.rows(
        ytop,
        ymid - 1,
        |y| ((cx - edge(y)).round() as i64, (cx + edge(y)).round() as i64),
        shade(b.color, 0.95),
        FOREGROUND,
    );
    let (glass, class) = if front {
        (GLASS, FRONT_WINDOW)
    } else {
        (shade(GLASS, 1.15), BACK_WINDOW)
    };
    cv.rows(
        ytop + 2,
        ymid - 1,
        |y| {
            (
                (cx - edge(y) + 2.0).ceil() as i64,
                (cx + edge(y) - 2.0).floor() as i64,
            )
        },
        glass,
        class,
    );

    let lamp_w = (width / 6).max(2);
    let lamp = if front { HEADLIGHT } else { TAILLIGHT };
    let lamp_rows = if front { (ymid + 2, ymid + 3) } else { (ymid + 1, ymid + 4) };
    cv.rect(x0 + 1, lamp_rows.0, x0 + lamp_w, lamp_rows.1, lamp, FOREGROUND);
    cv.rect(x1 - lamp_w, lamp_rows.0, x1 - 1, lamp_rows.1, lamp, FOREGROUND);
    if front {
        cv.rect(x0 + lamp_w + 2, ymid + 2, x1 - lamp_w - 2, ymid + 3, GRILLE, FOREGROUND);
    }

    let pw = (width as f64 * 0.14).round().max(2.0) as i64;
    let (pc, py) = (cx.round() as i64, b.yb - 5);
    cv.rect(pc - pw, py, pc + pw, py + 3, PLATE_BG, PLATE);
    let mut x = pc - pw + 1;
    while x < pc + pw {
        cv.rect(x, py + 1, x, py + 2, PLATE_INK, PLATE);
        x += 2;
    }
}
