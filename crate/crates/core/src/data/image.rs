use mvip_autograd::Tensor;

/// Interleaved `H×W×C` `f32` raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

/// Inclusive-exclusive pixel box `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * channels, "image buffer size");
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Number of pixels whose first channel exceeds 0.5.
    pub fn count_foreground(&self) -> usize {
        self.data.chunks(self.channels).filter(|p| p[0] > 0.5).count()
    }

    /// Bounding box of the pixels whose first channel exceeds 0.5.
    pub fn foreground_bbox(&self) -> Option<BBox> {
        let mut bb: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x, 0) > 0.5 {
                    let b = bb.get_or_insert(BBox {
                        y0: y,
                        x0: x,
                        y1: y + 1,
                        x1: x + 1,
                    });
                    b.y0 = b.y0.min(y);
                    b.x0 = b.x0.min(x);
                    b.y1 = b.y1.max(y + 1);
                    b.x1 = b.x1.max(x + 1);
                }
            }
        }
        bb
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// integer positions); outside the raster reads as zero.
    pub fn sample_bilinear(&self, y: f64, x: f64, out: &mut [f32]) {
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = (y - y0) as f32;
        let fx = (x - x0) as f32;
        out.iter_mut().for_each(|v| *v = 0.0);
        for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                let w = wy * wx;
                if w == 0.0 {
                    continue;
                }
                let yy = y0 as isize + dy;
                let xx = x0 as isize + dx;
                if yy < 0 || xx < 0 || yy >= self.height as isize || xx >= self.width as isize {
                    continue;
                }
                let p = self.pixel(yy as usize, xx as usize);
                for (o, v) in out.iter_mut().zip(p) {
                    *o += w * v;
                }
            }
        }
    }

    /// Nearest-neighbour sample; outside reads as zero.
    pub fn sample_nearest(&self, y: f64, x: f64, out: &mut [f32]) {
        let yy = y.round();
        let xx = x.round();
        if yy < 0.0 || xx < 0.0 || yy >= self.height as f64 || xx >= self.width as f64 {
            out.iter_mut().for_each(|v| *v = 0.0);
        } else {
            out.copy_from_slice(self.pixel(yy as usize, xx as usize));
        }
    }

    /// Channel-first tensor `C×H×W` with `(v − offset) · scale`.
    pub fn to_chw_tensor(&self, offset: f64, scale: f64) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![0.0; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[(ch * h + y) * w + x] = (self.get(y, x, ch) as f64 - offset) * scale;
                }
            }
        }
        Tensor::new([c, h, w], data)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(y, self.width - 1 - x, c));
                }
            }
        }
        out
    }
}
