//! Binary morphology, connected components and contour tracing.

use crate::mask::Mask;

/// Offsets of a disc of the given radius around the origin.
fn disc(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dr in -r..=r {
        for dc in -r..=r {
            if dr * dr + dc * dc <= r * r {
                out.push((dr, dc));
            }
        }
    }
    out
}

/// Dilation with a disc; out-of-image pixels are background.
pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let se = disc(radius);
    Mask::from_fn(mask.height(), mask.width(), |r, c| {
        se.iter()
            .any(|&(dr, dc)| mask.get_signed(r as isize + dr, c as isize + dc))
    })
}

/// Erosion with a disc; out-of-image pixels are background, so objects
/// touching the border erode from it as well.
pub fn erode(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let se = disc(radius);
    Mask::from_fn(mask.height(), mask.width(), |r, c| {
        se.iter()
            .all(|&(dr, dc)| mask.get_signed(r as isize + dr, c as isize + dc))
    })
}

const NEIGHBOURS4: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// 4-connected foreground components as pixel lists, ordered by first pixel
/// in raster order.
pub fn components(mask: &Mask) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.shape();
    let mut label = vec![usize::MAX; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if mask.data()[start] == 0 || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut pixels = Vec::new();
        let mut stack = vec![start];
        label[start] = id;
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            pixels.push((r, c));
            for (dr, dc) in NEIGHBOURS4 {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if mask.get_signed(nr, nc) {
                    let j = nr as usize * w + nc as usize;
                    if label[j] == usize::MAX {
                        label[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        pixels.sort_unstable();
        out.push(pixels);
    }
    out
}

/// Clockwise Moore neighbourhood, starting west.
const MOORE: [(isize, isize); 8] = [
    (0, -1),
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
];

/// Outer boundary of the component containing `start` (its raster-first
/// pixel), traced with Moore-neighbour following. Returns pixels in order
/// around the shape, without repeating the start.
pub fn trace_contour(mask: &Mask, start: (usize, usize)) -> Vec<(usize, usize)> {
    let inside = |p: (isize, isize)| mask.get_signed(p.0, p.1);
    let s = (start.0 as isize, start.1 as isize);
    let mut contour = vec![start];
    // the raster-first pixel always has background to its west
    let mut current = s;
    let mut back = 0usize;
    let limit = 4 * mask.height() * mask.width() + 8;
    for _ in 0..limit {
        let mut found = None;
        for k in 1..=8 {
            let dir = (back + k) % 8;
            let next = (current.0 + MOORE[dir].0, current.1 + MOORE[dir].1);
            if inside(next) {
                found = Some((next, dir));
                break;
            }
        }
        let Some((next, dir)) = found else {
            return contour;
        };
        // the neighbour examined just before `next` is background; restart
        // the sweep from it around the new pixel
        let prev_dir = (dir + 7) % 8;
        let bg = (current.0 + MOORE[prev_dir].0, current.1 + MOORE[prev_dir].1);
        back = MOORE
            .iter()
            .position(|&(dr, dc)| (next.0 + dr, next.1 + dc) == bg)
            .unwrap_or((dir + 4) % 8);
        if next == s && contour.len() > 1 {
            break;
        }
        contour.push((next.0 as usize, next.1 as usize));
        current = next;
    }
    contour
}
