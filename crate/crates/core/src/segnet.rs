//! Small encoder-decoder segmentation network with hand-composed backward
//! and standardized-feature capture points for the whitening losses.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{photometric_transform, Image, PhotometricParams};
use crate::numerics::{
    add_channel_bias, conv2d, instance_norm, relu, sigmoid, upsample_bilinear, GradPair, Tensor,
};
use crate::scalar::Scalar;

pub const NUM_HOOKED_LAYERS: usize = 3;
const IN_EPS: f64 = 1e-5;

/// Three stride-2 conv/instance-norm/relu encoder blocks followed by an
/// 8x bilinear upsample and a 1x1 conv + sigmoid head. Features are captured
/// right after each instance norm.
#[derive(Debug, Clone)]
pub struct SegNetwork<T: Scalar> {
    pub widths: [usize; 3],
    params: Vec<(String, Tensor<T>)>,
}

/// Parameter layout: for each encoder block i, `enc{i}.weight` [Co,Ci,3,3]
/// and `enc{i}.bias` [Co]; then `head.weight` [1,C2,1,1] and `head.bias` [1].
impl<T: Scalar> SegNetwork<T> {
    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// SGD step: p <- p - lr * g, with gradients in parameter order.
    pub fn apply_step(&mut self, grads: &[Tensor<T>], lr: T) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::InvalidArg(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for ((_, p), g) in self.params.iter_mut().zip(grads) {
            p.axpy(-lr, g);
        }
        Ok(())
    }
}

fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product::<usize>();
    let mut data = Vec::with_capacity(n);
    // Box-Muller from uniform pairs
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let a = 2.0 * std::f64::consts::PI * u2;
        data.push(T::of_f64(r * a.cos() * std));
        if data.len() < n {
            data.push(T::of_f64(r * a.sin() * std));
        }
    }
    Tensor::from_vec(shape, data).expect("sized above")
}

/// He-initialized network; biases start at zero. Deterministic in `seed`.
pub fn build<T: Scalar>(widths: [usize; 3], seed: u64) -> SegNetwork<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let mut cin = 3usize;
    for (i, &cout) in widths.iter().enumerate() {
        let fan_in = cin * 9;
        params.push((
            format!("enc{i}.weight"),
            he_normal(&[cout, cin, 3, 3], fan_in, &mut rng),
        ));
        params.push((format!("enc{i}.bias"), Tensor::zeros(&[cout])));
        cin = cout;
    }
    params.push((
        "head.weight".to_string(),
        he_normal(&[1, cin, 1, 1], cin, &mut rng),
    ));
    params.push(("head.bias".to_string(), Tensor::zeros(&[1])));
    SegNetwork { widths, params }
}

struct BlockTrace<T: Scalar> {
    conv: GradPair<T>,
    bias: GradPair<T>,
    norm: GradPair<T>,
    act: GradPair<T>,
}

/// Everything needed to run the backward pass for one forward call.
pub struct ForwardTrace<T: Scalar> {
    blocks: Vec<BlockTrace<T>>,
    upsample: GradPair<T>,
    head_conv: GradPair<T>,
    head_bias: GradPair<T>,
    head_act: GradPair<T>,
}

pub struct ForwardOutput<T: Scalar> {
    /// `[1,1,H,W]` probability map, strictly inside (0,1).
    pub probs: Tensor<T>,
    /// Post-instance-norm activations of the encoder blocks (empty unless
    /// capture was requested).
    pub features: Vec<Tensor<T>>,
    trace: ForwardTrace<T>,
}

impl<T: Scalar> ForwardOutput<T> {
    /// Backprop from a gradient on the probability map, plus optional extra
    /// gradients injected at each captured feature. Returns gradients in
    /// parameter order followed by the gradient w.r.t. the input image.
    pub fn backward(
        &self,
        grad_probs: &Tensor<T>,
        feature_grads: &[Option<Tensor<T>>],
    ) -> Result<Vec<Tensor<T>>> {
        let t = &self.trace;
        if feature_grads.len() != t.blocks.len() {
            return Err(Error::InvalidArg(format!(
                "{} feature gradients for {} blocks",
                feature_grads.len(),
                t.blocks.len()
            )));
        }
        let mut param_grads: Vec<Option<Tensor<T>>> = vec![None; 2 * t.blocks.len() + 2];
        let g = t.head_act.backward(grad_probs).remove(0);
        let mut hb = t.head_bias.backward(&g);
        let gbias = hb.remove(1);
        let mut hc = t.head_conv.backward(&hb.remove(0));
        let gweight = hc.remove(1);
        let nb = 2 * t.blocks.len();
        param_grads[nb] = Some(gweight);
        param_grads[nb + 1] = Some(gbias);
        let mut g = t.upsample.backward(&hc.remove(0)).remove(0);
        for (i, block) in t.blocks.iter().enumerate().rev() {
            let mut g_norm_out = block.act.backward(&g).remove(0);
            if let Some(fg) = &feature_grads[i] {
                g_norm_out.axpy(T::one(), fg);
            }
            let g_bias_out = block.norm.backward(&g_norm_out).remove(0);
            let mut bb = block.bias.backward(&g_bias_out);
            param_grads[2 * i + 1] = Some(bb.remove(1));
            let mut cb = block.conv.backward(&bb.remove(0));
            param_grads[2 * i] = Some(cb.remove(1));
            g = cb.remove(0);
        }
        let mut out: Vec<Tensor<T>> = param_grads
            .into_iter()
            .map(|g| g.expect("all parameter gradients filled"))
            .collect();
        out.push(g);
        Ok(out)
    }
}

/// Forward pass on a `[1,3,H,W]` image with H, W divisible by 8.
pub fn forward<T: Scalar>(
    net: &SegNetwork<T>,
    image: &Tensor<T>,
    capture: bool,
) -> Result<ForwardOutput<T>> {
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "forward expects [1,3,H,W], got {s:?}"
        )));
    }
    let (h, w) = (s[2], s[3]);
    if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArg(format!(
            "input dims {h}x{w} must be positive multiples of 8"
        )));
    }
    let eps = T::of_f64(IN_EPS);
    let mut blocks = Vec::with_capacity(3);
    let mut features = Vec::new();
    let mut x = image.clone();
    for i in 0..net.widths.len() {
        let weight = net.param(&format!("enc{i}.weight")).expect("built params");
        let bias = net.param(&format!("enc{i}.bias")).expect("built params");
        let conv = conv2d(&x, weight, 2, 1)?;
        let biased = add_channel_bias(&conv.value, bias)?;
        let norm = instance_norm(&biased.value, eps)?;
        if capture {
            features.push(norm.value.clone());
        }
        let act = relu(&norm.value);
        x = act.value.clone();
        blocks.push(BlockTrace {
            conv,
            bias: biased,
            norm,
            act,
        });
    }
    let upsample = upsample_bilinear(&x, h, w)?;
    let head_conv = conv2d(
        &upsample.value,
        net.param("head.weight").expect("built params"),
        1,
        0,
    )?;
    let head_bias = add_channel_bias(&head_conv.value, net.param("head.bias").expect("built params"))?;
    let head_act = sigmoid(&head_bias.value);
    let probs = head_act.value.clone();
    Ok(ForwardOutput {
        probs,
        features,
        trace: ForwardTrace {
            blocks,
            upsample,
            head_conv,
            head_bias,
            head_act,
        },
    })
}

pub struct PairOutput<T: Scalar> {
    pub orig: ForwardOutput<T>,
    pub aug: ForwardOutput<T>,
    /// The photometrically transformed image, as fed to the network.
    pub aug_tensor: Tensor<T>,
}

pub fn tensor_from_image<T: Scalar>(image: &Image) -> Tensor<T> {
    let t = image.to_tensor();
    let data = t.data().iter().map(|&v| T::of_f64(v)).collect();
    Tensor::from_vec(t.shape(), data).expect("same layout")
}

/// Runs one parameter set over an image and its photometric transform,
/// capturing the standardized features of both passes.
pub fn forward_pair<T: Scalar>(
    net: &SegNetwork<T>,
    image: &Image,
    params: &PhotometricParams,
    seed: u64,
) -> Result<PairOutput<T>> {
    let aug_img = photometric_transform(image, params, seed);
    let x = tensor_from_image::<T>(image);
    let tx = tensor_from_image::<T>(&aug_img);
    let orig = forward(net, &x, true)?;
    let aug = forward(net, &tx, true)?;
    Ok(PairOutput {
        orig,
        aug,
        aug_tensor: tx,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub config_hash: String,
    pub rng_seed: u64,
}

/// On-disk container: magic "SUPW", u32 version, JSON metadata block, then
/// named f32 tensors. All integers little-endian.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

const MAGIC: &[u8; 4] = b"SUPW";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_network<T: Scalar>(net: &SegNetwork<T>, meta: CheckpointMeta) -> Self {
        let tensors = net
            .params
            .iter()
            .map(|(n, t)| {
                let data: Vec<f32> = t.data().iter().map(|&v| v.as_f64() as f32).collect();
                (n.clone(), Tensor::from_vec(t.shape(), data).expect("same layout"))
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            meta,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds a network from the `enc*`/`head*` tensors; widths come from
    /// the stored shapes.
    pub fn to_network<T: Scalar>(&self) -> Result<SegNetwork<T>> {
        let mut widths = [0usize; 3];
        let mut params = Vec::new();
        for i in 0..3 {
            let wname = format!("enc{i}.weight");
            let bname = format!("enc{i}.bias");
            let w = self
                .tensor(&wname)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {wname}")))?;
            if w.shape().len() != 4 {
                return Err(Error::Checkpoint(format!("bad shape for {wname}")));
            }
            widths[i] = w.shape()[0];
            let b = self
                .tensor(&bname)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {bname}")))?;
            params.push((wname, convert(w)));
            params.push((bname, convert(b)));
        }
        for name in ["head.weight", "head.bias"] {
            let t = self
                .tensor(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            params.push((name.to_string(), convert(t)));
        }
        Ok(SegNetwork { widths, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&self.version.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let mut r = Reader { b: &bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(Error::Checkpoint(format!("implausible rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            if numel > 100_000_000 {
                return Err(Error::Checkpoint("shape table corrupt".into()));
            }
            let raw = r.take(numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(Checkpoint {
            version,
            meta,
            tensors,
        })
    }
}

fn convert<T: Scalar>(t: &Tensor<f32>) -> Tensor<T> {
    let data = t.data().iter().map(|&v| T::of_f64(v as f64)).collect();
    Tensor::from_vec(t.shape(), data).expect("same layout")
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(Error::Checkpoint("file truncated".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let s = self.take(4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let s = self.take(8)?;
        Ok(u64::from_le_bytes(s.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint<T: Scalar>(net: &SegNetwork<T>, path: &Path) -> Result<()> {
    Checkpoint::from_network(net, CheckpointMeta::default()).save(path)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<SegNetwork<T>> {
    Checkpoint::load(path)?.to_network()
}
