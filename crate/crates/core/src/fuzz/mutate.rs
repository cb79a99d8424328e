use rand::Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_MAX_LEN: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    BitFlip,
    ByteSet,
    ByteDelete,
    ByteInsert,
    Splice,
}

impl Mutation {
    pub const ALL: [Mutation; 5] =
        [Mutation::BitFlip, Mutation::ByteSet, Mutation::ByteDelete, Mutation::ByteInsert, Mutation::Splice];
}

/// Applies one uniformly chosen mutation. Operations that cannot apply to the
/// current length (editing an empty input, growing a full one) fall back to
/// insert or set respectively. The result never exceeds `max_len`.
pub fn mutate<R: Rng + ?Sized>(input: &[u8], corpus: &[&[u8]], rng: &mut R, max_len: usize) -> (Vec<u8>, Mutation) {
    let mut out = input[..input.len().min(max_len)].to_vec();
    let mut op = Mutation::ALL[rng.gen_range(0..Mutation::ALL.len())];
    if out.is_empty() && matches!(op, Mutation::BitFlip | Mutation::ByteSet | Mutation::ByteDelete) {
        op = Mutation::ByteInsert;
    }
    if out.len() >= max_len && op == Mutation::ByteInsert {
        op = Mutation::ByteSet;
    }
    if max_len == 0 {
        return (out, op);
    }
    match op {
        Mutation::BitFlip => {
            let i = rng.gen_range(0..out.len());
            out[i] ^= 1 << rng.gen_range(0..8);
        }
        Mutation::ByteSet => {
            let i = rng.gen_range(0..out.len());
            out[i] = rng.gen();
        }
        Mutation::ByteDelete => {
            let i = rng.gen_range(0..out.len());
            out.remove(i);
        }
        Mutation::ByteInsert => {
            let i = rng.gen_range(0..=out.len());
            out.insert(i, rng.gen());
        }
        Mutation::Splice => {
            let donor = if corpus.is_empty() { input } else { corpus[rng.gen_range(0..corpus.len())] };
            if !donor.is_empty() {
                let start = rng.gen_range(0..donor.len());
                let len = rng.gen_range(1..=donor.len() - start);
                let at = rng.gen_range(0..=out.len());
                let room = max_len - out.len();
                if room > 0 {
                    let take = len.min(room);
                    out.splice(at..at, donor[start..start + take].iter().copied());
                } else {
                    let at = at.min(out.len() - 1);
                    let take = len.min(out.len() - at);
                    out[at..at + take].copy_from_slice(&donor[start..start + take]);
                }
            } else {
                out.insert(rng.gen_range(0..=out.len()), rng.gen());
            }
        }
    }
    (out, op)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_input_grows_by_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (out, op) = mutate(&[], &[], &mut rng, 16);
            if op == Mutation::ByteInsert {
                assert_eq!(out.len(), 1);
            }
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut x = b"seed".to_vec();
            let mut seq = Vec::new();
            for _ in 0..200 {
                x = mutate(&x, &[b"donor".as_slice()], &mut rng, 64).0;
                seq.push(x.clone());
            }
            seq
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn respects_max_len_over_many_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let donor = vec![7u8; 40];
        let mut x = Vec::new();
        for _ in 0..100_000 {
            x = mutate(&x, &[&donor], &mut rng, 32).0;
            assert!(x.len() <= 32);
        }
    }

    proptest! {
        #[test]
        fn output_within_bound(input in proptest::collection::vec(any::<u8>(), 0..64), seed: u64, max in 1usize..64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, _) = mutate(&input, &[&input], &mut rng, max);
            prop_assert!(out.len() <= max);
        }
    }
}
