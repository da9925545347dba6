//! Stable LSD radix sort of `u64` keys carrying `u32` payloads.

/// Sorts `keys` ascending, permuting `values` alongside. Equal keys keep their
/// input order. Byte passes on which every key agrees are skipped.
pub fn radix_sort_pairs(keys: &mut Vec<u64>, values: &mut Vec<u32>) {
    assert_eq!(keys.len(), values.len());
    let n = keys.len();
    if n <= 1 {
        return;
    }
    let mut tmp_keys = vec![0u64; n];
    let mut tmp_vals = vec![0u32; n];
    for pass in 0..8 {
        let shift = pass * 8;
        let mut counts = [0usize; 256];
        for &k in keys.iter() {
            counts[((k >> shift) & 0xff) as usize] += 1;
        }
        if counts.iter().any(|&c| c == n) {
            continue;
        }
        let mut sum = 0;
        for c in counts.iter_mut() {
            let here = *c;
            *c = sum;
            sum += here;
        }
        for i in 0..n {
            let b = ((keys[i] >> shift) & 0xff) as usize;
            let pos = counts[b];
            tmp_keys[pos] = keys[i];
            tmp_vals[pos] = values[i];
            counts[b] = pos + 1;
        }
        std::mem::swap(keys, &mut tmp_keys);
        std::mem::swap(values, &mut tmp_vals);
    }
}
