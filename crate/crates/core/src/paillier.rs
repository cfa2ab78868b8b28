//! Paillier cryptosystem with `g = n + 1` and a fixed-point codec for values
//! in `[0, 1]`.

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::rngs::OsRng;
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::digest::sha256;
use crate::error::{Error, Result};

pub const MIN_KEY_BITS: u64 = 256;
pub const DEFAULT_KEY_BITS: u64 = 1024;
pub const TEST_KEY_BITS: u64 = 512;
pub const DEFAULT_SCALE: u64 = 1_000_000;
pub const MIN_SCALE: u64 = 1_000;

const MILLER_RABIN_ROUNDS: usize = 40;
const SMALL_PRIMES: [u32; 24] = [3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97];

type KeyId = [u8; 8];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
    g: BigUint,
    id: KeyId,
}

#[derive(Clone)]
struct PrivateKey {
    lambda: BigUint,
    mu: BigUint,
}

#[derive(Clone)]
pub struct PaillierKeyPair {
    public: PublicKey,
    private: PrivateKey,
}

impl std::fmt::Debug for PaillierKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PaillierKeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext {
    value: BigUint,
    key: KeyId,
}

impl Ciphertext {
    pub fn value(&self) -> &BigUint {
        &self.value
    }
}

/// Generates a key pair with a `bits`-bit modulus. A seed makes generation
/// reproducible; `None` draws from the operating system.
pub fn keygen(bits: u64, seed: Option<u64>) -> Result<PaillierKeyPair> {
    match seed {
        Some(s) => PaillierKeyPair::generate(bits, &mut ChaCha20Rng::seed_from_u64(s)),
        None => PaillierKeyPair::generate(bits, &mut OsRng),
    }
}

impl PaillierKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(bits: u64, rng: &mut R) -> Result<Self> {
        if bits < MIN_KEY_BITS || bits % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "modulus must be an even number of bits >= {MIN_KEY_BITS}, got {bits}"
            )));
        }
        loop {
            let p = random_prime(bits / 2, rng);
            let q = random_prime(bits / 2, rng);
            if p == q {
                continue;
            }
            let n = &p * &q;
            let p1 = &p - 1u32;
            let q1 = &q - 1u32;
            if !n.gcd(&(&p1 * &q1)).is_one() {
                continue;
            }
            let lambda = p1.lcm(&q1);
            let n_squared = &n * &n;
            let g = &n + 1u32;
            let l = (g.modpow(&lambda, &n_squared) - 1u32) / &n;
            let Some(mu) = l.modinv(&n) else { continue };
            let id = key_id(&n);
            return Ok(Self {
                public: PublicKey { n, n_squared, g, id },
                private: PrivateKey { lambda, mu },
            });
        }
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint> {
        if c.key != self.public.id {
            return Err(Error::KeyMismatch);
        }
        let pk = &self.public;
        let x = c.value.modpow(&self.private.lambda, &pk.n_squared);
        let l = (x - 1u32) / &pk.n;
        Ok((l * &self.private.mu) % &pk.n)
    }
}

impl PublicKey {
    pub fn n(&self) -> &BigUint {
        &self.n
    }

    /// `(n, g)` as decimal strings, the form recorded on the ledger.
    pub fn to_decimal(&self) -> (String, String) {
        (self.n.to_str_radix(10), self.g.to_str_radix(10))
    }

    pub fn encrypt<R: RngCore + CryptoRng>(&self, m: &BigUint, rng: &mut R) -> Result<Ciphertext> {
        if m >= &self.n {
            return Err(Error::PlaintextRange(format!("plaintext must be below the {}-bit modulus", self.n.bits())));
        }
        let r = loop {
            let r = rng.gen_biguint_range(&BigUint::one(), &self.n);
            if r.gcd(&self.n).is_one() {
                break r;
            }
        };
        // g^m = 1 + m·n (mod n²) for g = n + 1
        let gm = (BigUint::one() + m * &self.n) % &self.n_squared;
        let rn = r.modpow(&self.n, &self.n_squared);
        Ok(Ciphertext {
            value: (gm * rn) % &self.n_squared,
            key: self.id,
        })
    }

    pub fn encrypt_u64<R: RngCore + CryptoRng>(&self, m: u64, rng: &mut R) -> Result<Ciphertext> {
        self.encrypt(&BigUint::from(m), rng)
    }

    /// Homomorphic addition: the product of ciphertexts modulo `n²`.
    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        if a.key != self.id || b.key != self.id {
            return Err(Error::KeyMismatch);
        }
        Ok(Ciphertext {
            value: (&a.value * &b.value) % &self.n_squared,
            key: self.id,
        })
    }
}

fn key_id(n: &BigUint) -> KeyId {
    let d = sha256(&n.to_bytes_le());
    d[..8].try_into().expect("8 bytes")
}

fn random_prime<R: RngCore + CryptoRng>(bits: u64, rng: &mut R) -> BigUint {
    loop {
        let mut candidate = rng.gen_biguint(bits);
        // top two bits set so p·q has exactly 2·bits bits; odd
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(bits - 2, true);
        candidate.set_bit(0, true);
        if SMALL_PRIMES.iter().any(|&sp| (&candidate % sp).is_zero()) {
            continue;
        }
        if is_probable_prime(&candidate, rng) {
            return candidate;
        }
    }
}

fn is_probable_prime<R: RngCore>(n: &BigUint, rng: &mut R) -> bool {
    let one = BigUint::one();
    let two = BigUint::from(2u32);
    if n < &BigUint::from(4u32) {
        return n >= &two;
    }
    if n.is_even() {
        return false;
    }
    let n1 = n - 1u32;
    let s = n1.trailing_zeros().expect("n > 1");
    let d = &n1 >> s;
    'witness: for _ in 0..MILLER_RABIN_ROUNDS {
        let a = rng.gen_biguint_range(&two, &n1);
        let mut x = a.modpow(&d, n);
        if x == one || x == n1 {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// `round(x · scale)` for `x ∈ [0, 1]`.
pub fn encode_fixed(x: f64, scale: u64) -> Result<u64> {
    if scale < MIN_SCALE {
        return Err(Error::InvalidConfig(format!("fixed-point scale must be >= {MIN_SCALE}")));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::PlaintextRange(format!("{x} is outside [0, 1]")));
    }
    Ok((x * scale as f64).round() as u64)
}

pub fn decode_fixed(v: u64, scale: u64) -> f64 {
    v as f64 / scale as f64
}

/// Component-wise mean of encrypted fixed-point vectors: each component is
/// summed homomorphically, decrypted once and divided by the number of
/// vectors.
pub fn secure_mean(ciphertexts: &[Vec<Ciphertext>], keys: &PaillierKeyPair, scale: u64) -> Result<Vec<f64>> {
    let count = ciphertexts.len();
    let first = ciphertexts.first().ok_or(Error::EmptyAggregation)?;
    if ciphertexts.iter().any(|c| c.len() != first.len()) {
        return Err(Error::InvalidInput("encrypted vectors differ in length".into()));
    }
    let pk = keys.public();
    if pk.n <= BigUint::from(count as u64) * scale {
        return Err(Error::InvalidConfig("modulus too small for the aggregate".into()));
    }
    (0..first.len())
        .map(|j| {
            let mut acc = ciphertexts[0][j].clone();
            for row in &ciphertexts[1..] {
                acc = pk.add(&acc, &row[j])?;
            }
            let sum = keys.decrypt(&acc)?;
            let sum = u64::try_from(&sum).map_err(|_| Error::PlaintextRange("aggregate exceeds u64".into()))?;
            Ok(sum as f64 / count as f64 / scale as f64)
        })
        .collect()
}

/// Encodes and encrypts a vector of values in `[0, 1]`.
pub fn encrypt_vector<R: RngCore + CryptoRng>(values: &[f64], pk: &PublicKey, scale: u64, rng: &mut R) -> Result<Vec<Ciphertext>> {
    values
        .iter()
        .map(|&x| pk.encrypt_u64(encode_fixed(x, scale)?, rng))
        .collect()
}
