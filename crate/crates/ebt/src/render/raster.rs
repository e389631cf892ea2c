//! Scanline polygon fill, morphology, and blur primitives shared by the
//! synthetic footage renderer and the compositing masks.

use super::FrameBuffer;

/// Even-odd scanline fill. A pixel is inside when its center (x+0.5,
/// y+0.5) falls inside the polygon.
pub fn fill_polygon(points: &[[f64; 2]], w: usize, h: usize) -> Vec<bool> {
    let n = points.len();
    let mut mask = vec![false; w * h];
    if n < 3 {
        return mask;
    }
    let mut xs: Vec<f64> = Vec::with_capacity(n);
    for y in 0..h {
        let cy = y as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let a = points[i];
            let b = points[(i + 1) % n];
            if (a[1] <= cy && b[1] > cy) || (b[1] <= cy && a[1] > cy) {
                let t = (cy - a[1]) / (b[1] - a[1]);
                xs.push(a[0] + t * (b[0] - a[0]));
            }
        }
        xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
        for pair in xs.chunks_exact(2) {
            let x0 = pair[0].max(0.0);
            let x1 = pair[1].min(w as f64);
            let mut x = x0.floor() as usize;
            while (x as f64 + 0.5) < x0 {
                x += 1;
            }
            while x < w && (x as f64 + 0.5) < x1 {
                mask[y * w + x] = true;
                x += 1;
            }
        }
    }
    mask
}

/// Signed shoelace area of a polygon, absolute value.
pub fn polygon_area(points: &[[f64; 2]]) -> f64 {
    let n = points.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = points[i];
        let b = points[(i + 1) % n];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    (acc / 2.0).abs()
}

/// Morphological erosion with a square structuring element of radius `r`
/// (side 2r+1). Out-of-bounds neighbors count as empty, so the mask also
/// erodes at the image border.
pub fn erode(mask: &[bool], w: usize, h: usize, r: usize) -> Vec<bool> {
    if r == 0 {
        return mask.to_vec();
    }
    let r = r as isize;
    let mut out = vec![false; w * h];
    for y in 0..h as isize {
        'px: for x in 0..w as isize {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue 'px;
                    }
                    if !mask[ny as usize * w + nx as usize] {
                        continue 'px;
                    }
                }
            }
            out[y as usize * w + x as usize] = true;
        }
    }
    out
}

/// Separable Gaussian blur with zero padding (values fade to 0 at the
/// border, which is what soft masks want).
pub fn gaussian_blur(img: &[f32], w: usize, h: usize, sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / ksum).collect();

    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w as isize {
            let mut acc = 0.0f64;
            for (ki, k) in kernel.iter().enumerate() {
                let sx = x + ki as isize - radius;
                if sx >= 0 && sx < w as isize {
                    acc += k * img[y * w + sx as usize] as f64;
                }
            }
            tmp[y * w + x as usize] = acc as f32;
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h as isize {
        for x in 0..w {
            let mut acc = 0.0f64;
            for (ki, k) in kernel.iter().enumerate() {
                let sy = y + ki as isize - radius;
                if sy >= 0 && sy < h as isize {
                    acc += k * tmp[sy as usize * w + x] as f64;
                }
            }
            out[y as usize * w + x] = acc as f32;
        }
    }
    out
}

/// Fill an axis-aligned ellipse.
pub fn fill_ellipse(frame: &mut FrameBuffer, cx: f64, cy: f64, rx: f64, ry: f64, rgb: [f32; 3]) {
    let (w, h) = (frame.width(), frame.height());
    let x0 = ((cx - rx).floor().max(0.0)) as usize;
    let x1 = ((cx + rx).ceil().min(w as f64)) as usize;
    let y0 = ((cy - ry).floor().max(0.0)) as usize;
    let y1 = ((cy + ry).ceil().min(h as f64)) as usize;
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                frame.set(x, y, rgb);
            }
        }
    }
}
