//! Node overlays drawn on input frames.

use nrmosaic::{ColorImage, Node};

/// Green for confident nodes through red for uncertain ones, on a log scale.
fn variance_color(variance: f64) -> [f32; 3] {
    let t = ((1.0 + variance).log10() / 3.0).clamp(0.0, 1.0) as f32;
    [t, 1.0 - t, 0.1]
}

fn disc(img: &mut ColorImage, cx: f64, cy: f64, r: f64, color: [f32; 3]) {
    let (x0, x1) = ((cx - r).floor().max(0.0) as i64, (cx + r).ceil() as i64);
    let (y0, y1) = ((cy - r).floor().max(0.0) as i64, (cy + r).ceil() as i64);
    for y in y0..=y1.min(img.height as i64 - 1) {
        for x in x0..=x1.min(img.width as i64 - 1) {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if dx * dx + dy * dy <= r * r {
                img.put(x as usize, y as usize, color);
            }
        }
    }
}

/// Copy of `frame` with every visible node drawn as a dot.
pub fn draw_nodes(frame: &ColorImage, nodes: &[Node]) -> ColorImage {
    let mut out = frame.clone();
    for n in nodes {
        let p = n.position;
        if p.x < -4.0 || p.y < -4.0 || p.x > frame.width as f64 + 4.0 || p.y > frame.height as f64 + 4.0 {
            continue;
        }
        disc(&mut out, p.x, p.y, 4.0, [0.0, 0.0, 0.0]);
        disc(&mut out, p.x, p.y, 2.5, variance_color(n.variance));
    }
    out
}
