//! Diagnostic raster: log-mel spectrogram, waveform and excitation panels
//! stacked vertically.

use hwg_autograd::Tensor;
use image::{Rgb, RgbImage};

pub const WIDTH: u32 = 1200;
pub const MEL_HEIGHT: u32 = 240;
pub const WAVE_HEIGHT: u32 = 160;
pub const PULSE_HEIGHT: u32 = 160;
pub const GAP: u32 = 6;

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([200, 200, 200]);
const WAVE: Rgb<u8> = Rgb([31, 119, 180]);
const PULSE: Rgb<u8> = Rgb([214, 39, 40]);

/// Vertical extent of each panel, top to bottom.
pub fn panel_rows() -> [(u32, u32); 3] {
    let wave_top = MEL_HEIGHT + GAP;
    let pulse_top = wave_top + WAVE_HEIGHT + GAP;
    [(0, MEL_HEIGHT), (wave_top, WAVE_HEIGHT), (pulse_top, PULSE_HEIGHT)]
}

pub fn height() -> u32 {
    MEL_HEIGHT + WAVE_HEIGHT + PULSE_HEIGHT + 2 * GAP
}

/// `mel` is `[frames, n_mels]` log-mel; `wave` and `pulse` are at the
/// sample rate. An empty `wave` leaves its panel blank.
pub fn render(mel: &Tensor, wave: &[f64], pulse: &[f64]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, height(), BACKGROUND);
    let [mel_rows, wave_rows, pulse_rows] = panel_rows();
    draw_mel(&mut img, mel, mel_rows);
    draw_signal(&mut img, wave, wave_rows, WAVE, false);
    draw_signal(&mut img, pulse, pulse_rows, PULSE, true);
    img
}

fn draw_mel(img: &mut RgbImage, mel: &Tensor, (top, h): (u32, u32)) {
    let (frames, n) = (mel.dim(0), mel.dim(1));
    if frames == 0 || n == 0 {
        return;
    }
    let data = mel.data();
    let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    for x in 0..WIDTH {
        let t = (x as usize * frames / WIDTH as usize).min(frames - 1);
        for y in 0..h {
            // Low mel bins at the bottom.
            let bin = ((h - 1 - y) as usize * n / h as usize).min(n - 1);
            let v = (data[t * n + bin] - lo) / span;
            img.put_pixel(x, top + y, colormap(v));
        }
    }
}

/// Per-column peak of `signal`. Centred panels show min/max around zero;
/// `magnitude` panels show the largest absolute value as a bar from the
/// centre line up.
fn draw_signal(img: &mut RgbImage, signal: &[f64], (top, h): (u32, u32), color: Rgb<u8>, magnitude: bool) {
    let mid = top + h / 2;
    for x in 0..WIDTH {
        img.put_pixel(x, mid, AXIS);
    }
    if signal.is_empty() {
        return;
    }
    let peak = signal.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let half = (h / 2 - 1) as f64;
    let n = signal.len();
    for x in 0..WIDTH as usize {
        let a = x * n / WIDTH as usize;
        let b = ((x + 1) * n / WIDTH as usize).max(a + 1).min(n);
        if a >= n {
            break;
        }
        let col = &signal[a..b];
        let (lo, hi) = if magnitude {
            (0.0, col.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        } else {
            col.iter().fold((0.0f64, 0.0f64), |(l, u), &v| (l.min(v), u.max(v)))
        };
        let y_top = mid as f64 - (hi / peak * half).round();
        let y_bot = mid as f64 - (lo / peak * half).round();
        for y in y_top as u32..=y_bot as u32 {
            img.put_pixel(x as u32, y, color);
        }
    }
}

/// Dark blue through green to yellow.
fn colormap(v: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 4] = [[68.0, 1.0, 84.0], [49.0, 104.0, 142.0], [53.0, 183.0, 121.0], [253.0, 231.0, 37.0]];
    let v = v.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (v.floor() as usize).min(STOPS.len() - 2);
    let f = v - i as f64;
    let c = |k: usize| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Number of separate spikes in the pulse panel: runs of adjacent columns
/// whose bar reaches above half the panel's half-height.
pub fn count_pulse_spikes(img: &RgbImage) -> usize {
    let [_, _, (top, h)] = panel_rows();
    let probe = top + h / 2 - h / 4;
    let mut count = 0;
    let mut inside = false;
    for x in 0..img.width() {
        let hit = *img.get_pixel(x, probe) == PULSE;
        if hit && !inside {
            count += 1;
        }
        inside = hit;
    }
    count
}
