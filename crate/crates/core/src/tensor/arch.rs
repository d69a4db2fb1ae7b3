//! Layer lists, their shapes, and the flat parameter layout they induce.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        bias: bool,
        prunable: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        prunable: bool,
    },
    /// Non-overlapping max pooling (stride equals window).
    MaxPool2d { window: usize },
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense {
            inputs,
            outputs,
            bias: true,
            prunable: true,
        }
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
            bias: true,
            prunable: true,
        }
    }

    /// Same layer with its weights exempt from pruning.
    pub fn unprunable(self) -> Self {
        match self {
            LayerSpec::Dense {
                inputs,
                outputs,
                bias,
                ..
            } => LayerSpec::Dense {
                inputs,
                outputs,
                bias,
                prunable: false,
            },
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                bias,
                ..
            } => LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                bias,
                prunable: false,
            },
            other => other,
        }
    }

    pub fn without_bias(self) -> Self {
        match self {
            LayerSpec::Dense {
                inputs,
                outputs,
                prunable,
                ..
            } => LayerSpec::Dense {
                inputs,
                outputs,
                bias: false,
                prunable,
            },
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                prunable,
                ..
            } => LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                bias: false,
                prunable,
            },
            other => other,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
        }
    }

    fn descriptor(&self) -> String {
        match self {
            LayerSpec::Dense {
                inputs,
                outputs,
                bias,
                prunable,
            } => format!("dense({inputs},{outputs},bias={bias},prunable={prunable})"),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                bias,
                prunable,
            } => format!(
                "conv2d({in_channels},{out_channels},k={kernel},s={stride},p={padding},bias={bias},prunable={prunable})"
            ),
            LayerSpec::MaxPool2d { window } => format!("maxpool2d({window})"),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::Flatten => "flatten".into(),
        }
    }

    /// Output shape (per sample) for a given input shape.
    fn output_shape(&self, input: &[usize], index: usize) -> Result<Vec<usize>> {
        let bad = |msg: String| Error::Shape(format!("layer {index} ({}): {msg}", self.name()));
        match *self {
            LayerSpec::Dense {
                inputs, outputs, ..
            } => {
                if inputs == 0 || outputs == 0 {
                    return Err(bad("extents must be positive".into()));
                }
                if input != [inputs] {
                    return Err(bad(format!("expects input [{inputs}], got {input:?}")));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err(bad("extents must be positive".into()));
                }
                let [c, h, w] = input else {
                    return Err(bad(format!("expects [C,H,W] input, got {input:?}")));
                };
                if *c != in_channels {
                    return Err(bad(format!("expects {in_channels} channels, got {c}")));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(bad(format!("kernel {kernel} larger than input {h}x{w}")));
                }
                let oh = (h + 2 * padding - kernel) / stride + 1;
                let ow = (w + 2 * padding - kernel) / stride + 1;
                Ok(vec![out_channels, oh, ow])
            }
            LayerSpec::MaxPool2d { window } => {
                if window == 0 {
                    return Err(bad("window must be positive".into()));
                }
                let [c, h, w] = input else {
                    return Err(bad(format!("expects [C,H,W] input, got {input:?}")));
                };
                if *h < window || *w < window {
                    return Err(bad(format!("window {window} larger than input {h}x{w}")));
                }
                Ok(vec![*c, h / window, w / window])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// (weight shape, bias length) of a parametric layer.
    fn param_shapes(&self) -> Option<(Vec<usize>, Option<usize>)> {
        match *self {
            LayerSpec::Dense {
                inputs,
                outputs,
                bias,
                ..
            } => Some((vec![outputs, inputs], bias.then_some(outputs))),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                bias.then_some(out_channels),
            )),
            _ => None,
        }
    }

    pub fn is_prunable(&self) -> bool {
        matches!(
            self,
            LayerSpec::Dense { prunable: true, .. } | LayerSpec::Conv2d { prunable: true, .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Weight,
    Bias,
}

/// A contiguous slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub layer: usize,
    pub role: ParamRole,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
    /// Fan-in of the owning layer, used for initialization.
    pub fan_in: usize,
    pub prunable: bool,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Validated network description: per-sample input shape plus layer list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    /// `shapes[i]` is the input shape of layer `i`; the last entry is the output.
    shapes: Vec<Vec<usize>>,
    segments: Vec<Segment>,
    n_params: usize,
}

impl Architecture {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Shape(format!(
                "input shape {input_shape:?} must be non-empty with positive extents"
            )));
        }
        if layers.is_empty() {
            return Err(Error::Shape("architecture has no layers".into()));
        }
        let mut shapes = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            let next = layer.output_shape(shapes.last().unwrap(), i)?;
            shapes.push(next);
        }
        if shapes.last().unwrap().len() != 1 {
            return Err(Error::Shape(format!(
                "network output must be a vector of class scores, got per-sample shape {:?}",
                shapes.last().unwrap()
            )));
        }
        let mut segments = Vec::new();
        let mut offset = 0;
        for (i, layer) in layers.iter().enumerate() {
            if let Some((wshape, bias)) = layer.param_shapes() {
                let len: usize = wshape.iter().product();
                let fan_in = wshape[1..].iter().product();
                segments.push(Segment {
                    layer: i,
                    role: ParamRole::Weight,
                    offset,
                    len,
                    shape: wshape,
                    fan_in,
                    prunable: layer.is_prunable(),
                });
                offset += len;
                if let Some(b) = bias {
                    segments.push(Segment {
                        layer: i,
                        role: ParamRole::Bias,
                        offset,
                        len: b,
                        shape: vec![b],
                        fan_in,
                        prunable: false,
                    });
                    offset += b;
                }
            }
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
            segments,
            n_params: offset,
        })
    }

    /// LeNet-5 for 3x32x32 inputs. The first convolution is kept dense.
    pub fn lenet5(classes: usize) -> Self {
        Architecture::new(
            vec![3, 32, 32],
            vec![
                LayerSpec::conv(3, 6, 5).unprunable(),
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { window: 2 },
                LayerSpec::conv(6, 16, 5),
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { window: 2 },
                LayerSpec::Flatten,
                LayerSpec::dense(400, 120),
                LayerSpec::Relu,
                LayerSpec::dense(120, 84),
                LayerSpec::Relu,
                LayerSpec::dense(84, classes),
            ],
        )
        .expect("lenet5 is well formed")
    }

    /// Fully connected ReLU network with the given widths (input first, classes last).
    pub fn mlp(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument(
                "mlp needs at least input and output widths".into(),
            ));
        }
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            if i > 0 {
                layers.push(LayerSpec::Relu);
            }
            layers.push(LayerSpec::dense(pair[0], pair[1]));
        }
        Architecture::new(vec![widths[0]], layers)
    }

    /// Parses a model name: `lenet5`, `lenet5:<classes>` or `mlp:<w0>-<w1>-...`.
    pub fn from_name(name: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown model '{name}'"));
        match name.split_once(':') {
            None if name == "lenet5" => Ok(Architecture::lenet5(10)),
            Some(("lenet5", classes)) => {
                let c: usize = classes.parse().map_err(|_| bad())?;
                if c == 0 {
                    return Err(bad());
                }
                Ok(Architecture::lenet5(c))
            }
            Some(("mlp", widths)) => {
                let widths: Vec<usize> = widths
                    .split('-')
                    .map(|w| w.parse().map_err(|_| bad()))
                    .collect::<Result<_>>()?;
                Architecture::mlp(&widths)
            }
            _ => Err(bad()),
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Per-sample input shape of layer `i` (`i == layers().len()` gives the output shape).
    pub fn shape_at(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn classes(&self) -> usize {
        self.shapes.last().unwrap()[0]
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn num_params(&self) -> usize {
        self.n_params
    }

    pub fn weight_segment(&self, layer: usize) -> Option<&Segment> {
        self.segments
            .iter()
            .find(|s| s.layer == layer && s.role == ParamRole::Weight)
    }

    pub fn bias_segment(&self, layer: usize) -> Option<&Segment> {
        self.segments
            .iter()
            .find(|s| s.layer == layer && s.role == ParamRole::Bias)
    }

    /// Per-parameter flag: true for weights of prunable layers.
    pub fn prunable_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.n_params];
        for s in &self.segments {
            if s.prunable {
                flags[s.range()].iter_mut().for_each(|f| *f = true);
            }
        }
        flags
    }

    pub fn num_prunable(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.prunable)
            .map(|s| s.len)
            .sum()
    }

    /// Canonical text form; two architectures are interchangeable iff these match.
    pub fn descriptor(&self) -> String {
        let input = self
            .input_shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        let layers = self
            .layers
            .iter()
            .map(LayerSpec::descriptor)
            .collect::<Vec<_>>()
            .join(";");
        format!("input={input};{layers}")
    }

    /// SHA-256 of [`Architecture::descriptor`], stored in mask and checkpoint files.
    pub fn descriptor_hash(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.descriptor().as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lenet_shapes_and_param_count() {
        let a = Architecture::lenet5(10);
        assert_eq!(a.shape_at(3), &[6, 14, 14]);
        assert_eq!(a.shape_at(6), &[16, 5, 5]);
        assert_eq!(a.classes(), 10);
        assert_eq!(a.num_params(), 456 + 2416 + 48120 + 10164 + 850);
        assert_eq!(a.num_prunable(), 2400 + 48000 + 10080 + 840);
    }

    #[test]
    fn segments_partition_the_flat_vector() {
        let a = Architecture::mlp(&[5, 7, 3]).unwrap();
        let mut next = 0;
        for s in a.segments() {
            assert_eq!(s.offset, next);
            next += s.len;
        }
        assert_eq!(next, a.num_params());
        assert_eq!(a.num_params(), 5 * 7 + 7 + 7 * 3 + 3);
    }

    #[test]
    fn incompatible_layers_are_rejected() {
        let err = Architecture::new(
            vec![4],
            vec![LayerSpec::dense(4, 3), LayerSpec::dense(2, 1)],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert!(Architecture::new(vec![4], vec![LayerSpec::dense(0, 3)]).is_err());
        assert!(Architecture::new(vec![3, 8, 8], vec![LayerSpec::conv(3, 2, 3)]).is_err());
    }

    #[test]
    fn names_parse() {
        assert_eq!(
            Architecture::from_name("mlp:4-8-2").unwrap(),
            Architecture::mlp(&[4, 8, 2]).unwrap()
        );
        assert_eq!(Architecture::from_name("lenet5:100").unwrap().classes(), 100);
        assert!(Architecture::from_name("resnet20").is_err());
        assert!(Architecture::from_name("mlp:4-x").is_err());
    }

    #[test]
    fn descriptor_hash_tracks_structure() {
        let a = Architecture::mlp(&[4, 8, 2]).unwrap();
        let b = Architecture::mlp(&[4, 9, 2]).unwrap();
        assert_ne!(a.descriptor_hash(), b.descriptor_hash());
        assert_eq!(a.descriptor_hash(), a.clone().descriptor_hash());
    }
}
