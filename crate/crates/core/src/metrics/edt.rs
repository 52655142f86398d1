//! Exact Euclidean distance transform (Felzenszwalb and Huttenlocher)
//! that also reports the nearest foreground pixel.

/// Distance from every pixel to the nearest `true` pixel, and that pixel's
/// flat index. Foreground pixels map to themselves at distance 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Edt {
    pub distance: Vec<f64>,
    pub nearest: Vec<usize>,
}

pub fn edt_with_indices(mask: &[bool], height: usize, width: usize) -> Edt {
    let n = height * width;
    assert_eq!(mask.len(), n);
    // column pass: squared vertical distance and row of nearest foreground
    let mut col_d2 = vec![f64::INFINITY; n];
    let mut col_row = vec![usize::MAX; n];
    for x in 0..width {
        let mut last: Option<usize> = None;
        for y in 0..height {
            if mask[y * width + x] {
                last = Some(y);
            }
            if let Some(r) = last {
                col_d2[y * width + x] = ((y - r) as f64).powi(2);
                col_row[y * width + x] = r;
            }
        }
        let mut next: Option<usize> = None;
        for y in (0..height).rev() {
            if mask[y * width + x] {
                next = Some(y);
            }
            if let Some(r) = next {
                let d = ((r - y) as f64).powi(2);
                if d < col_d2[y * width + x] {
                    col_d2[y * width + x] = d;
                    col_row[y * width + x] = r;
                }
            }
        }
    }
    let mut distance = vec![f64::INFINITY; n];
    let mut nearest: Vec<usize> = (0..n).collect();
    let mut sites = Vec::with_capacity(width);
    let mut bounds = Vec::with_capacity(width + 1);
    for y in 0..height {
        let f = &col_d2[y * width..(y + 1) * width];
        sites.clear();
        bounds.clear();
        for q in 0..width {
            if !f[q].is_finite() {
                continue;
            }
            loop {
                let Some(&p) = sites.last() else {
                    sites.push(q);
                    bounds.push(f64::NEG_INFINITY);
                    break;
                };
                let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                if s <= *bounds.last().expect("bound per site") {
                    sites.pop();
                    bounds.pop();
                } else {
                    sites.push(q);
                    bounds.push(s);
                    break;
                }
            }
        }
        if sites.is_empty() {
            continue;
        }
        let mut k = 0;
        for x in 0..width {
            while k + 1 < sites.len() && bounds[k + 1] < x as f64 {
                k += 1;
            }
            let q = sites[k];
            let d2 = (x as f64 - q as f64).powi(2) + f[q];
            distance[y * width + x] = d2.sqrt();
            nearest[y * width + x] = col_row[y * width + q] * width + q;
        }
    }
    Edt { distance, nearest }
}
