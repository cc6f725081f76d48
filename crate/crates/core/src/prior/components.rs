use crate::labelio::LabelGrid;

/// Maximal 8-connected foreground blob with its bounding box.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    /// Flat raster indices of member pixels, ascending.
    pub pixels: Vec<usize>,
    /// Inclusive bounds `(x_min, y_min, x_max, y_max)`.
    pub bbox: (usize, usize, usize, usize),
    pub h: usize,
    pub w: usize,
    /// Side length `max(h, w)`.
    pub s: usize,
    /// Bounding-box center `(x, y)` in pixel coordinates.
    pub center: (f64, f64),
}

impl Component {
    fn from_pixels(mut pixels: Vec<usize>, width: usize) -> Self {
        pixels.sort_unstable();
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for &p in &pixels {
            let (y, x) = (p / width, p % width);
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let (h, w) = (y1 - y0 + 1, x1 - x0 + 1);
        Component {
            pixels,
            bbox: (x0, y0, x1, y1),
            h,
            w,
            s: h.max(w),
            center: ((x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0),
        }
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

/// 8-connected components of the pixels whose label is in `foreground`,
/// ordered by their first pixel in raster order.
pub fn connected_components(mask: &LabelGrid, foreground: &[u8]) -> Vec<Component> {
    let (h, w) = (mask.height, mask.width);
    let fg: Vec<bool> = mask.labels.iter().map(|l| foreground.contains(l)).collect();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !fg[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if fg[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        out.push(Component::from_pixels(pixels, w));
    }
    out
}

/// Keeps components with side length `s >= s_min`.
pub fn filter_components(comps: Vec<Component>, s_min: usize) -> Vec<Component> {
    comps.into_iter().filter(|c| c.s >= s_min).collect()
}
