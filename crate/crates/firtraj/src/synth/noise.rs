//! Seeded value noise for background textures. Lattice values come from an
//! integer hash, interpolated with a smoothstep fade so the field is C1;
//! everything is a pure function of (coordinates, seed).

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn lattice(ix: i64, iy: i64, seed: u64) -> f32 {
    let h = splitmix(seed ^ (ix as u64).wrapping_mul(0x9e3779b97f4a7c15)
        ^ (iy as u64).wrapping_mul(0xc2b2ae3d27d4eb4f));
    (h >> 40) as f32 / ((1u64 << 24) as f32)
}

#[inline]
fn fade(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Smooth value noise in [0, 1).
pub fn value_noise2(x: f64, y: f64, seed: u64) -> f32 {
    let xf = x.floor();
    let yf = y.floor();
    let (ix, iy) = (xf as i64, yf as i64);
    let tx = fade((x - xf) as f32);
    let ty = fade((y - yf) as f32);
    let v00 = lattice(ix, iy, seed);
    let v10 = lattice(ix + 1, iy, seed);
    let v01 = lattice(ix, iy + 1, seed);
    let v11 = lattice(ix + 1, iy + 1, seed);
    let top = v00 + (v10 - v00) * tx;
    let bot = v01 + (v11 - v01) * tx;
    top + (bot - top) * ty
}

/// Two-octave fractal sum of [`value_noise2`], still in [0, 1).
pub fn fbm2(x: f64, y: f64, seed: u64) -> f32 {
    (value_noise2(x, y, seed) * 2.0 + value_noise2(x * 3.1, y * 3.1, seed ^ 0x51ed)) / 3.0
}

/// One-dimensional smooth value noise in [0, 1).
pub fn value_noise1(x: f64, seed: u64) -> f32 {
    let xf = x.floor();
    let ix = xf as i64;
    let t = fade((x - xf) as f32);
    let a = lattice(ix, 0, seed);
    let b = lattice(ix + 1, 0, seed);
    a + (b - a) * t
}
