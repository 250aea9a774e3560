//! Sliding-window assembly over a pixel stream.
//!
//! Pixels arrive in row-major order, one token per pixel carrying all
//! channels. The assembler keeps `kernel` rows of the zero-padded plane and
//! emits a window whenever the newest position completes a stride-aligned
//! `kernel x kernel` block. Window values are laid out `(channel, ky, kx)`.

use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl WindowGeometry {
    pub fn padded_height(&self) -> usize {
        self.height + 2 * self.pad
    }

    pub fn padded_width(&self) -> usize {
        self.width + 2 * self.pad
    }

    pub fn out_height(&self) -> usize {
        (self.padded_height() - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.padded_width() - self.kernel) / self.stride + 1
    }

    pub fn windows_per_image(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn window_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn tokens_per_image(&self) -> usize {
        self.height * self.width
    }

    /// Whether padded position `(py, px)` is the bottom-right corner of an output window.
    fn completes_window(&self, py: usize, px: usize) -> bool {
        let k = self.kernel;
        if py + 1 < k || px + 1 < k {
            return false;
        }
        let (ty, tx) = (py + 1 - k, px + 1 - k);
        ty % self.stride == 0
            && tx % self.stride == 0
            && ty / self.stride < self.out_height()
            && tx / self.stride < self.out_width()
    }
}

#[derive(Debug, Clone)]
pub struct WindowAssembler {
    geom: WindowGeometry,
    rows: Vec<Vec<Arc<[i32]>>>,
    zero: Arc<[i32]>,
    /// Next padded linear position to fill.
    pos: usize,
    received: usize,
}

impl WindowAssembler {
    pub fn new(geom: WindowGeometry) -> Self {
        assert!(geom.kernel > 0 && geom.stride > 0 && geom.pad < geom.kernel);
        assert!(geom.padded_height() >= geom.kernel && geom.padded_width() >= geom.kernel);
        let zero: Arc<[i32]> = vec![0; geom.channels].into();
        Self {
            rows: vec![vec![zero.clone(); geom.padded_width()]; geom.kernel],
            zero,
            geom,
            pos: 0,
            received: 0,
        }
    }

    pub fn geometry(&self) -> &WindowGeometry {
        &self.geom
    }

    /// Accepts the next pixel and returns the windows it completes, including
    /// those completed by the padding that precedes it (and, for the last pixel
    /// of an image, the padding that follows it).
    pub fn push(&mut self, token: Arc<[i32]>) -> Vec<Vec<i32>> {
        debug_assert_eq!(token.len(), self.geom.channels);
        let g = self.geom;
        let (y, x) = (self.received / g.width, self.received % g.width);
        let target = (y + g.pad) * g.padded_width() + x + g.pad;
        let mut out = Vec::new();
        while self.pos < target {
            self.fill(self.zero.clone(), &mut out);
        }
        self.fill(token, &mut out);
        self.received += 1;
        if self.received == g.tokens_per_image() {
            let end = g.padded_height() * g.padded_width();
            while self.pos < end {
                self.fill(self.zero.clone(), &mut out);
            }
            self.pos = 0;
            self.received = 0;
        }
        out
    }

    fn fill(&mut self, token: Arc<[i32]>, out: &mut Vec<Vec<i32>>) {
        let g = self.geom;
        let (py, px) = (self.pos / g.padded_width(), self.pos % g.padded_width());
        self.rows[py % g.kernel][px] = token;
        self.pos += 1;
        if g.completes_window(py, px) {
            out.push(self.window(py + 1 - g.kernel, px + 1 - g.kernel));
        }
    }

    fn window(&self, top: usize, left: usize) -> Vec<i32> {
        let k = self.geom.kernel;
        let mut w = Vec::with_capacity(self.geom.window_len());
        for c in 0..self.geom.channels {
            for ky in 0..k {
                let row = &self.rows[(top + ky) % k];
                for kx in 0..k {
                    w.push(row[left + kx][c]);
                }
            }
        }
        w
    }
}

/// Window at output position `(oy, ox)` of a CHW plane, zero padded, `(c, ky, kx)` order.
pub fn gather_window(plane: &[i32], g: &WindowGeometry, oy: usize, ox: usize) -> Vec<i32> {
    let k = g.kernel;
    let mut w = Vec::with_capacity(g.window_len());
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let y = (oy * g.stride + ky) as isize - g.pad as isize;
                let x = (ox * g.stride + kx) as isize - g.pad as isize;
                let inside = y >= 0 && x >= 0 && (y as usize) < g.height && (x as usize) < g.width;
                w.push(if inside {
                    plane[c * g.height * g.width + y as usize * g.width + x as usize]
                } else {
                    0
                });
            }
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom(c: usize, h: usize, w: usize, k: usize, s: usize, p: usize) -> WindowGeometry {
        WindowGeometry {
            channels: c,
            height: h,
            width: w,
            kernel: k,
            stride: s,
            pad: p,
        }
    }

    /// Streams a CHW plane pixel by pixel; returns (token index, window) pairs.
    fn stream(plane: &[i32], g: WindowGeometry) -> Vec<(usize, Vec<i32>)> {
        let mut asm = WindowAssembler::new(g);
        let mut out = Vec::new();
        for t in 0..g.height * g.width {
            let pixel: Vec<i32> = (0..g.channels).map(|c| plane[c * g.height * g.width + t]).collect();
            for w in asm.push(pixel.into()) {
                out.push((t, w));
            }
        }
        out
    }

    #[test]
    fn first_window_on_thirteenth_pixel() {
        let g = geom(1, 5, 5, 3, 1, 0);
        let plane: Vec<i32> = (0..25).collect();
        let windows = stream(&plane, g);
        assert_eq!(windows.len(), 9);
        assert_eq!(windows[0].0, 12);
        assert_eq!(windows[0].1, vec![0, 1, 2, 5, 6, 7, 10, 11, 12]);
    }

    #[test]
    fn small_window_counts() {
        let plane: Vec<i32> = (0..16).collect();
        assert_eq!(stream(&plane, geom(1, 4, 4, 3, 1, 0)).len(), 4);
        assert_eq!(stream(&plane, geom(1, 4, 4, 3, 2, 0)).len(), 1);
    }

    #[test]
    fn assembler_resets_between_images() {
        let g = geom(2, 3, 3, 3, 1, 1);
        let plane: Vec<i32> = (0..18).collect();
        let mut asm = WindowAssembler::new(g);
        let mut runs = Vec::new();
        for _ in 0..2 {
            let mut ws = Vec::new();
            for t in 0..9 {
                ws.extend(asm.push(vec![plane[t], plane[9 + t]].into()));
            }
            runs.push(ws);
        }
        assert_eq!(runs[0].len(), 9);
        assert_eq!(runs[0], runs[1]);
    }

    proptest! {
        #[test]
        fn streaming_windows_match_brute_force(
            c in 1usize..4, h in 1usize..10, w in 1usize..10,
            k in prop::sample::select(vec![1usize, 2, 3, 5]), s in 1usize..4, p in 0usize..3,
        ) {
            prop_assume!(p < k && h + 2 * p >= k && w + 2 * p >= k);
            let g = geom(c, h, w, k, s, p);
            let plane: Vec<i32> = (0..(c * h * w) as i32).map(|v| v + 1).collect();
            let streamed: Vec<Vec<i32>> = stream(&plane, g).into_iter().map(|(_, w)| w).collect();
            let mut brute = Vec::new();
            for oy in 0..g.out_height() {
                for ox in 0..g.out_width() {
                    brute.push(gather_window(&plane, &g, oy, ox));
                }
            }
            prop_assert_eq!(streamed.len(), g.windows_per_image());
            prop_assert_eq!(streamed, brute);
        }
    }
}
