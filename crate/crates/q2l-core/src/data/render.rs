//! Rasterization of scene specs into RGB canvases.
//!
//! Backgrounds are a bilinear blend of four random dim corner colors with
//! per-pixel uniform noise, so global pooling sees real clutter. Objects are
//! drawn opaque in list order; later objects occlude earlier ones. Every
//! drawn pixel stays inside the object's box.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ColorName, SceneObject, SceneSpec, Shape};

/// Fixed bright palette, far from the dim background range.
pub fn palette_rgb(color: ColorName) -> [u8; 3] {
    match color {
        ColorName::Red => [220, 40, 40],
        ColorName::Green => [40, 200, 60],
        ColorName::Blue => [50, 80, 220],
        ColorName::Yellow => [230, 210, 50],
    }
}

const BG_CORNER_LO: u8 = 20;
const BG_CORNER_HI: u8 = 110;
const BG_NOISE: i16 = 15;

/// Deterministic background for one sample: four corner colors blended
/// bilinearly, then +/-`BG_NOISE` uniform noise per channel.
pub fn render_background(h: usize, w: usize, bg_seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(bg_seed);
    let corners: [[u8; 3]; 4] =
        std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(BG_CORNER_LO..=BG_CORNER_HI)));
    let mut buf = vec![0u8; h * w * 3];
    for y in 0..h {
        let v = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.0 };
        for x in 0..w {
            let u = if w > 1 { x as f64 / (w - 1) as f64 } else { 0.0 };
            for c in 0..3 {
                let blend = f64::from(corners[0][c]) * (1.0 - u) * (1.0 - v)
                    + f64::from(corners[1][c]) * u * (1.0 - v)
                    + f64::from(corners[2][c]) * (1.0 - u) * v
                    + f64::from(corners[3][c]) * u * v;
                let noise = rng.random_range(-BG_NOISE..=BG_NOISE);
                let value = (blend.round() as i16 + noise).clamp(0, 255);
                buf[(y * w + x) * 3 + c] = value as u8;
            }
        }
    }
    buf
}

fn put(buf: &mut [u8], w: usize, px: usize, py: usize, rgb: [u8; 3]) {
    let at = (py * w + px) * 3;
    buf[at..at + 3].copy_from_slice(&rgb);
}

/// Draws one opaque object into the canvas. The object's box must lie
/// within the canvas.
pub fn draw_object(buf: &mut [u8], h: usize, w: usize, obj: &SceneObject) {
    let s = obj.size;
    debug_assert!(obj.x + s <= w && obj.y + s <= h, "object outside canvas");
    let rgb = palette_rgb(obj.color);
    match obj.shape {
        Shape::Square => {
            for py in obj.y..obj.y + s {
                for px in obj.x..obj.x + s {
                    put(buf, w, px, py, rgb);
                }
            }
        }
        Shape::Circle => {
            let r = s as f64 / 2.0;
            let cx = obj.x as f64 + r;
            let cy = obj.y as f64 + r;
            for py in obj.y..obj.y + s {
                for px in obj.x..obj.x + s {
                    let dx = px as f64 + 0.5 - cx;
                    let dy = py as f64 + 0.5 - cy;
                    if dx * dx + dy * dy <= r * r {
                        put(buf, w, px, py, rgb);
                    }
                }
            }
        }
        Shape::Triangle => {
            // Upward triangle: row j spans half-width (j+1)/2 about the
            // box center, reaching full width at the base.
            let cx = obj.x as f64 + s as f64 / 2.0;
            for j in 0..s {
                let half = (j + 1) as f64 / 2.0;
                for px in obj.x..obj.x + s {
                    if (px as f64 + 0.5 - cx).abs() <= half {
                        put(buf, w, px, obj.y + j, rgb);
                    }
                }
            }
        }
    }
}

/// Background plus every object, in spec order.
pub fn render_scene(spec: &SceneSpec, h: usize, w: usize) -> Vec<u8> {
    let mut buf = render_background(h, w, spec.bg_seed);
    for obj in &spec.objects {
        draw_object(&mut buf, h, w, obj);
    }
    buf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank(h: usize, w: usize) -> Vec<u8> {
        vec![0u8; h * w * 3]
    }

    fn obj(shape: Shape, x: usize, y: usize, size: usize) -> SceneObject {
        SceneObject {
            category: 0,
            shape,
            color: ColorName::Red,
            x,
            y,
            size,
        }
    }

    fn colored_pixels(buf: &[u8], w: usize, h: usize) -> Vec<(usize, usize)> {
        (0..h * w)
            .filter(|&i| buf[i * 3..i * 3 + 3] != [0, 0, 0])
            .map(|i| (i % w, i / w))
            .collect()
    }

    #[test]
    fn palette_is_pinned() {
        assert_eq!(palette_rgb(ColorName::Red), [220, 40, 40]);
        assert_eq!(palette_rgb(ColorName::Green), [40, 200, 60]);
        assert_eq!(palette_rgb(ColorName::Blue), [50, 80, 220]);
        assert_eq!(palette_rgb(ColorName::Yellow), [230, 210, 50]);
    }

    #[test]
    fn square_fills_its_box_exactly() {
        let mut buf = blank(12, 12);
        draw_object(&mut buf, 12, 12, &obj(Shape::Square, 3, 2, 5));
        let px = colored_pixels(&buf, 12, 12);
        assert_eq!(px.len(), 25);
        assert!(px.iter().all(|&(x, y)| (3..8).contains(&x) && (2..7).contains(&y)));
    }

    #[test]
    fn circle_is_round_symmetric_and_boxed() {
        let s = 8;
        let mut buf = blank(16, 16);
        draw_object(&mut buf, 16, 16, &obj(Shape::Circle, 4, 4, s));
        let px = colored_pixels(&buf, 16, 16);
        assert!(px.iter().all(|&(x, y)| (4..12).contains(&x) && (4..12).contains(&y)));
        let area = px.len() as f64;
        let ideal = std::f64::consts::PI * (s as f64 / 2.0).powi(2);
        assert!((area - ideal).abs() / ideal < 0.25, "area {area} vs {ideal}");
        // Horizontal mirror symmetry about the box center.
        for &(x, y) in &px {
            let mirrored = 4 + 11 - x;
            assert!(px.contains(&(mirrored, y)), "({x},{y}) lacks mirror");
        }
        // Corners of the box stay empty.
        for &(x, y) in &[(4usize, 4usize), (11, 4), (4, 11), (11, 11)] {
            assert!(!px.contains(&(x, y)));
        }
    }

    #[test]
    fn triangle_widens_monotonically_to_a_full_base() {
        let s = 7;
        let mut buf = blank(12, 12);
        draw_object(&mut buf, 12, 12, &obj(Shape::Triangle, 2, 3, s));
        let px = colored_pixels(&buf, 12, 12);
        assert!(px.iter().all(|&(x, y)| (2..9).contains(&x) && (3..10).contains(&y)));
        let widths: Vec<usize> = (0..s)
            .map(|j| px.iter().filter(|&&(_, y)| y == 3 + j).count())
            .collect();
        for w in widths.windows(2) {
            assert!(w[1] >= w[0], "widths must not shrink: {widths:?}");
        }
        assert!(widths[0] <= 2, "apex must be narrow: {widths:?}");
        assert_eq!(widths[s - 1], s, "base must span the box");
    }

    #[test]
    fn later_objects_occlude_earlier_ones() {
        let mut buf = blank(10, 10);
        draw_object(&mut buf, 10, 10, &obj(Shape::Square, 1, 1, 6));
        let mut top = obj(Shape::Square, 3, 3, 6);
        top.color = ColorName::Blue;
        draw_object(&mut buf, 10, 10, &top);
        let at = |x: usize, y: usize| {
            let i = (y * 10 + x) * 3;
            [buf[i], buf[i + 1], buf[i + 2]]
        };
        assert_eq!(at(2, 2), palette_rgb(ColorName::Red));
        assert_eq!(at(4, 4), palette_rgb(ColorName::Blue), "overlap shows the later object");
        assert_eq!(at(8, 8), palette_rgb(ColorName::Blue));
    }

    #[test]
    fn background_is_seeded_dim_and_noisy() {
        let a = render_background(20, 20, 99);
        let b = render_background(20, 20, 99);
        let c = render_background(20, 20, 100);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let lo = i16::from(BG_CORNER_LO) - BG_NOISE;
        let hi = i16::from(BG_CORNER_HI) + BG_NOISE;
        assert!(a.iter().all(|&v| (lo..=hi).contains(&i16::from(v))));
        // Noise must actually vary pixel to pixel.
        assert!(a.chunks(3).collect::<std::collections::BTreeSet<_>>().len() > 50);
    }

    #[test]
    fn scene_render_is_deterministic() {
        let spec = SceneSpec {
            bg_seed: 5,
            objects: vec![obj(Shape::Circle, 2, 2, 6), obj(Shape::Triangle, 8, 9, 5)],
        };
        assert_eq!(render_scene(&spec, 16, 16), render_scene(&spec, 16, 16));
    }
}
