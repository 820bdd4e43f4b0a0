//! Index-map constructors for the gather / scatter-add op pair.
//!
//! All structured data movement on the tape — transposes, broadcasts,
//! reductions, pooling, padding, slicing, HOG cell and block assembly —
//! is expressed as either `gather` (out[i] = x[map[i]]) or `scatter_add`
//! (out[map[i]] += x[i]). The two are adjoint under the same map, which is
//! what makes every one of these movements differentiable to any order.
//! A map entry of -1 means "no source" (gather writes 0, scatter drops).

use crate::tensor::Tensor;

/// Gather map for the transpose of an `[r,c]` matrix.
pub fn transpose2(r: usize, c: usize) -> Vec<i64> {
    let mut map = vec![0i64; r * c];
    for i in 0..r {
        for j in 0..c {
            map[j * r + i] = (i * c + j) as i64;
        }
    }
    map
}

/// Gather map replicating one scalar across `n` elements.
pub fn broadcast_scalar(n: usize) -> Vec<i64> {
    vec![0i64; n]
}

/// Scatter map summing each length-`k` row of an `[n,k]` tensor into one
/// of `n` outputs. Doubles as spatial/global pooling by flattening the
/// pooled axes into `k`.
pub fn row_sum(n: usize, k: usize) -> Vec<i64> {
    let mut map = vec![0i64; n * k];
    for i in 0..n {
        for j in 0..k {
            map[i * k + j] = i as i64;
        }
    }
    map
}

/// Gather map broadcasting an `[n]` vector across rows to `[n,k]`.
/// Adjoint counterpart of `row_sum`.
pub fn row_broadcast(n: usize, k: usize) -> Vec<i64> {
    row_sum(n, k)
}

/// Scatter map summing `[n,c,h,w]` over the channel axis into `[n,h,w]`.
pub fn channel_sum(n: usize, c: usize, h: usize, w: usize) -> Vec<i64> {
    let hw = h * w;
    let mut map = vec![0i64; n * c * hw];
    for nn in 0..n {
        for cc in 0..c {
            for t in 0..hw {
                map[(nn * c + cc) * hw + t] = (nn * hw + t) as i64;
            }
        }
    }
    map
}

/// Gather map replicating `[n,h,w]` across `c` channels to `[n,c,h,w]`.
pub fn channel_broadcast(n: usize, c: usize, h: usize, w: usize) -> Vec<i64> {
    channel_sum(n, c, h, w)
}

/// Gather map slicing channel `ch` out of `[n,c,h,w]` as `[n,h,w]`.
pub fn channel_slice(n: usize, c: usize, h: usize, w: usize, ch: usize) -> Vec<i64> {
    let hw = h * w;
    let mut map = vec![0i64; n * hw];
    for nn in 0..n {
        for t in 0..hw {
            map[nn * hw + t] = ((nn * c + ch) * hw + t) as i64;
        }
    }
    map
}

/// Gather map for replicate (edge-clamp) padding of `[n,c,h,w]` by `p`
/// pixels on every spatial side.
pub fn replicate_pad(n: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<i64> {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut map = vec![0i64; n * c * hp * wp];
    let mut o = 0;
    for nn in 0..n {
        for cc in 0..c {
            for io in 0..hp {
                let i = (io as isize - p as isize).clamp(0, h as isize - 1) as usize;
                for jo in 0..wp {
                    let j = (jo as isize - p as isize).clamp(0, w as isize - 1) as usize;
                    map[o] = (((nn * c + cc) * h + i) * w + j) as i64;
                    o += 1;
                }
            }
        }
    }
    map
}

/// Gather map selecting the argmax of each 2x2 window of `[n,c,h,w]`
/// (stride 2, ties broken by scan order, trailing odd row/column dropped).
/// Computed from the forward values, after which the selection is a frozen
/// linear operation — exactly the max-pool gradient convention.
pub fn maxpool2_argmax(x: &Tensor) -> (Vec<i64>, Vec<usize>) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "maxpool2 wants [n,c,h,w]");
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / 2, w / 2);
    let d = x.data();
    let mut map = vec![0i64; n * c * ho * wo];
    let mut o = 0;
    for nn in 0..n {
        for cc in 0..c {
            let base = (nn * c + cc) * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + (2 * i) * w + 2 * j;
                    let mut bv = d[best];
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if d[idx] > bv {
                            bv = d[idx];
                            best = idx;
                        }
                    }
                    map[o] = best as i64;
                    o += 1;
                }
            }
        }
    }
    (map, vec![n, c, ho, wo])
}

/// Scatter map pooling `[n,h,w]` pixels into HOG cells `[n,bins,ch,cw]`
/// for one fixed orientation bin. Pixels outside the centered crop to a
/// cell multiple are dropped.
pub fn hog_cell_scatter(
    n: usize,
    h: usize,
    w: usize,
    cell: usize,
    bins: usize,
    bin: usize,
) -> (Vec<i64>, Vec<usize>) {
    let (ch, cw) = (h / cell, w / cell);
    let (crop_h, crop_w) = (ch * cell, cw * cell);
    let (off_h, off_w) = ((h - crop_h) / 2, (w - crop_w) / 2);
    let mut map = vec![-1i64; n * h * w];
    for nn in 0..n {
        for i in 0..crop_h {
            for j in 0..crop_w {
                let (cy, cx) = (i / cell, j / cell);
                let src = (nn * h + i + off_h) * w + j + off_w;
                map[src] = (((nn * bins + bin) * ch + cy) * cw + cx) as i64;
            }
        }
    }
    (map, vec![n, bins, ch, cw])
}

/// Gather map assembling overlapping HOG blocks from cell histograms
/// `[n,bins,ch,cw]` into `[n, blocks, block*block*bins]` (stride one cell).
pub fn hog_block_gather(
    n: usize,
    bins: usize,
    ch: usize,
    cw: usize,
    block: usize,
) -> (Vec<i64>, Vec<usize>) {
    let nby = ch + 1 - block;
    let nbx = cw + 1 - block;
    let blen = block * block * bins;
    let mut map = vec![0i64; n * nby * nbx * blen];
    let mut o = 0;
    for nn in 0..n {
        for by in 0..nby {
            for bx in 0..nbx {
                for dy in 0..block {
                    for dx in 0..block {
                        for b in 0..bins {
                            map[o] = (((nn * bins + b) * ch + by + dy) * cw + bx + dx) as i64;
                            o += 1;
                        }
                    }
                }
            }
        }
    }
    (map, vec![n, nby * nbx, blen])
}

/// One-hot encoding of class labels as an `[n,k]` tensor.
pub fn one_hot(labels: &[usize], k: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        data[i * k + y] = 1.0;
    }
    Tensor::from_raw(vec![labels.len(), k], data)
}
