//! Row-major run-length encoding of binary masks. Runs alternate between
//! unset and set pixels, starting with unset; the first run may be zero.

use clickprobe::clicks::BinaryMask;

pub fn encode(mask: &BinaryMask) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for &v in mask.data() {
        if v != current {
            runs.push(len);
            current = v;
            len = 0;
        }
        len += 1;
    }
    runs.push(len);
    runs
}

/// `None` when the runs do not cover exactly `h * w` pixels.
pub fn decode(runs: &[u32], h: usize, w: usize) -> Option<BinaryMask> {
    let mut data = Vec::with_capacity(h * w);
    for (i, &r) in runs.iter().enumerate() {
        data.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
        if data.len() > h * w {
            return None;
        }
    }
    (data.len() == h * w).then(|| BinaryMask::new(h, w, data).ok()).flatten()
}
