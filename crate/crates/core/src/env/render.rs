//! Direct rasterization of a CartPole state into a 3×37×85 frame.
//!
//! The horizontal view spans [`VIEW_WIDTH`] world units centred on the cart,
//! clamped so it never extends past the track ends. Pixels are stored as
//! 8-bit levels; the real-valued pixel is `level / 255`.

use std::io::{self, Write};

use super::cartpole::{State4, X_THRESHOLD};

pub const CHANNELS: usize = 3;
pub const HEIGHT: usize = 37;
pub const WIDTH: usize = 85;
pub const FRAME_LEN: usize = CHANNELS * HEIGHT * WIDTH;

pub const VIEW_WIDTH: f64 = 1.8;
pub const PIXELS_PER_UNIT: f64 = WIDTH as f64 / VIEW_WIDTH;

pub const BACKGROUND: [u8; 3] = [255, 255, 255];
pub const CART: [u8; 3] = [0, 0, 0];
pub const TRACK: [u8; 3] = [0, 0, 0];
pub const POLE: [u8; 3] = [202, 152, 101];

pub const TRACK_ROW: usize = 33;
pub const CART_TOP_ROW: usize = 27;
/// Cart spans `center ± CART_HALF_WIDTH` columns.
pub const CART_HALF_WIDTH: i64 = 6;
pub const POLE_LENGTH_PX: f64 = 24.0;

/// One rendered observation, channel-major (`[C, H, W]`).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Frame {
    levels: Vec<u8>,
}

impl Frame {
    pub fn blank() -> Self {
        let mut levels = vec![0u8; FRAME_LEN];
        for (c, plane) in levels.chunks_mut(HEIGHT * WIDTH).enumerate() {
            plane.fill(BACKGROUND[c]);
        }
        Frame { levels }
    }

    pub fn from_levels(levels: Vec<u8>) -> Option<Self> {
        (levels.len() == FRAME_LEN).then_some(Frame { levels })
    }

    pub fn levels(&self) -> &[u8] {
        &self.levels
    }

    pub fn shape(&self) -> [usize; 3] {
        [CHANNELS, HEIGHT, WIDTH]
    }

    /// Pixel value in `[0, 1]`.
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.levels[(c * HEIGHT + y) * WIDTH + x] as f32 / 255.0
    }

    pub fn rgb(&self, y: usize, x: usize) -> [u8; 3] {
        [0, 1, 2].map(|c| self.levels[(c * HEIGHT + y) * WIDTH + x])
    }

    fn set(&mut self, y: i64, x: i64, color: [u8; 3]) {
        if (0..HEIGHT as i64).contains(&y) && (0..WIDTH as i64).contains(&x) {
            for (c, &v) in color.iter().enumerate() {
                self.levels[(c * HEIGHT + y as usize) * WIDTH + x as usize] = v;
            }
        }
    }

    /// Real-valued pixels, channel-major.
    pub fn to_real(&self) -> Vec<f32> {
        self.levels.iter().map(|&v| v as f32 / 255.0).collect()
    }

    /// Binary PPM (P6, 8-bit).
    pub fn write_ppm<W: Write>(&self, mut out: W) -> io::Result<()> {
        write!(out, "P6\n{WIDTH} {HEIGHT}\n255\n")?;
        let mut buf = Vec::with_capacity(HEIGHT * WIDTH * 3);
        for y in 0..HEIGHT {
            for x in 0..WIDTH {
                buf.extend_from_slice(&self.rgb(y, x));
            }
        }
        out.write_all(&buf)
    }

    pub fn read_ppm(bytes: &[u8]) -> Option<Self> {
        let header = format!("P6\n{WIDTH} {HEIGHT}\n255\n");
        let body = bytes.strip_prefix(header.as_bytes())?;
        if body.len() != HEIGHT * WIDTH * 3 {
            return None;
        }
        let mut frame = Frame::blank();
        for (i, px) in body.chunks(3).enumerate() {
            frame.set((i / WIDTH) as i64, (i % WIDTH) as i64, [px[0], px[1], px[2]]);
        }
        Some(frame)
    }
}

/// World-x of the left edge of the view for a cart at `x`.
pub fn view_left(x: f64) -> f64 {
    let half = VIEW_WIDTH / 2.0;
    let center = x.clamp(-X_THRESHOLD + half, X_THRESHOLD - half);
    center - half
}

/// Continuous horizontal pixel coordinate of world position `wx` for a cart at `x`.
pub fn pixel_x(wx: f64, x: f64) -> f64 {
    (wx - view_left(x)) * PIXELS_PER_UNIT
}

/// Column holding the cart centre.
pub fn cart_column(x: f64) -> i64 {
    pixel_x(x, x).floor() as i64
}

pub fn render(s: &State4) -> Frame {
    let mut frame = Frame::blank();
    let center = cart_column(s.x);

    let track_start = pixel_x(-X_THRESHOLD, s.x).floor().max(0.0) as i64;
    let track_end = pixel_x(X_THRESHOLD, s.x).ceil().min(WIDTH as f64) as i64;
    for col in track_start..track_end {
        frame.set(TRACK_ROW as i64, col, TRACK);
    }

    // Pole first so the cart body covers its base.
    let origin_x = center as f64 + 0.5;
    let origin_y = CART_TOP_ROW as f64;
    let (sin, cos) = s.theta.sin_cos();
    let samples = (POLE_LENGTH_PX * 4.0) as usize;
    for k in 1..=samples {
        let t = k as f64 / samples as f64 * POLE_LENGTH_PX;
        let px = origin_x + t * sin;
        let py = origin_y - t * cos;
        frame.set(py.floor() as i64, px.floor() as i64, POLE);
    }

    for row in CART_TOP_ROW..TRACK_ROW {
        for col in center - CART_HALF_WIDTH..=center + CART_HALF_WIDTH {
            frame.set(row as i64, col, CART);
        }
    }
    frame
}
