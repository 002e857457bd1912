//! Compiled programs: micro-ops, descriptor table, layer markers and the
//! parameter image, with binary and text forms.

use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::desc::{Descriptor, MapView, Region};
use super::op::{assemble, disassemble, InstructionWord, MicroOp, OpKind, MAX_DESC_ID};
use super::pattern::{gen_addresses, Geometry};
use super::IsaError;
use crate::numerics::Format;

const MAGIC: &[u8; 4] = b"TFTP";
const VERSION: u32 = 1;

/// Ops `start..end` implement ledger layer `name`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpan {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

/// Ops `start..end` form step `step` of a scheduled GRU or MHA layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpan {
    pub layer: String,
    pub step: u8,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramMeta {
    /// Format descriptor, e.g. `fp:1:5:4`.
    pub format: String,
    /// SHA-256 of the config text and the parameter image.
    pub model_hash: String,
    pub config: String,
    /// Number of ping-pong weight groups streamed per frame.
    pub weight_groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub meta: ProgramMeta,
    pub descriptors: Vec<Descriptor>,
    #[serde(skip)]
    pub ops: Vec<MicroOp>,
    pub layers: Vec<LayerSpan>,
    pub groups: Vec<GroupSpan>,
    /// Parameter words in external memory, in streaming order.
    #[serde(skip)]
    pub image: Vec<u16>,
}

impl Program {
    pub fn format(&self) -> Result<Format, IsaError> {
        self.meta.format.parse().map_err(|e| IsaError::BadFile(format!("format: {e}")))
    }

    pub fn geometry(&self) -> Result<Geometry, IsaError> {
        Ok(Geometry::for_format(self.format()?))
    }

    /// Descriptor behind a pattern field; `None` for id 0.
    pub fn desc(&self, id: u32) -> Result<Option<&Descriptor>, IsaError> {
        if id == 0 {
            return Ok(None);
        }
        self.descriptors.get(id as usize - 1).map(Some).ok_or(IsaError::BadDescriptor(format!("id {id} not in table")))
    }

    pub fn map(&self, id: u32) -> Result<&MapView, IsaError> {
        match self.desc(id)? {
            Some(Descriptor::Map(v)) => Ok(v),
            d => Err(IsaError::BadDescriptor(format!("id {id}: expected a feature map, got {d:?}"))),
        }
    }

    pub fn push_desc(&mut self, d: Descriptor) -> Result<u32, IsaError> {
        let id = self.descriptors.len() as u32 + 1;
        if id > MAX_DESC_ID {
            return Err(IsaError::FieldOverflow { field: "descriptor id", value: id as u64 });
        }
        self.descriptors.push(d);
        Ok(id)
    }

    pub fn layer_of(&self, op: usize) -> Option<&str> {
        self.layers.iter().find(|s| (s.start..s.end).contains(&op)).map(|s| s.name.as_str())
    }

    /// MACs an op performs (issued plus skipped), from its descriptors.
    pub fn op_macs(&self, i: usize) -> Result<u64, IsaError> {
        let op = &self.ops[i];
        Ok(match op.kind {
            OpKind::ConvFlow => match self.desc(op.src1)? {
                Some(Descriptor::Conv { shape: s, .. }) => (s.cout * s.cin * s.k * s.out_len) as u64,
                d => return Err(IsaError::BadDescriptor(format!("conv weights: {d:?}"))),
            },
            OpKind::MmFlow => {
                let (a, b) = (self.map(op.src0)?, self.map(op.src1)?);
                (a.rows() * b.rows() * a.cols()) as u64
            }
            OpKind::EwMul => {
                let m = self.map(op.src0)?;
                (m.rows() * m.cols()) as u64
            }
            _ => 0,
        })
    }

    /// Static MAC count per layer span, in program order.
    pub fn macs_by_layer(&self) -> Result<Vec<(String, u64)>, IsaError> {
        let mut out: Vec<(String, u64)> = Vec::new();
        for s in &self.layers {
            let m: u64 = (s.start..s.end).map(|i| self.op_macs(i)).sum::<Result<u64, _>>()?;
            match out.iter_mut().find(|(n, _)| *n == s.name) {
                Some(e) => e.1 += m,
                None => out.push((s.name.clone(), m)),
            }
        }
        Ok(out)
    }

    pub fn count(&self, kind: OpKind) -> usize {
        self.ops.iter().filter(|o| o.kind == kind).count()
    }

    /// Check every descriptor's address patterns against the bank capacities.
    pub fn check_addresses(&self) -> Result<usize, IsaError> {
        let geo = self.geometry()?;
        let mut n = 0;
        for d in &self.descriptors {
            for p in d.patterns(&geo) {
                n += gen_addresses(&p, false, &geo)?.len();
                if p.dilation_stride > 1 {
                    gen_addresses(&p, true, &geo)?;
                }
            }
        }
        Ok(n)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), IsaError> {
        let header = serde_json::to_vec(self).map_err(|e| IsaError::BadFile(e.to_string()))?;
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(&header)?;
        out.write_all(&(self.ops.len() as u32).to_le_bytes())?;
        for op in &self.ops {
            out.write_all(&assemble(op)?.0.to_le_bytes())?;
        }
        out.write_all(&(self.image.len() as u32).to_le_bytes())?;
        for w in &self.image {
            out.write_all(&w.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, IsaError> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(IsaError::BadFile("not a program file".into()));
        }
        if read_u32(&mut input)? != VERSION {
            return Err(IsaError::BadFile("unsupported program version".into()));
        }
        let mut header = vec![0u8; read_u32(&mut input)? as usize];
        input.read_exact(&mut header)?;
        let mut prog: Program = serde_json::from_slice(&header).map_err(|e| IsaError::BadFile(e.to_string()))?;
        let n = read_u32(&mut input)? as usize;
        let mut b = [0u8; 8];
        for _ in 0..n {
            input.read_exact(&mut b)?;
            prog.ops.push(disassemble(InstructionWord(u64::from_le_bytes(b)))?);
        }
        let n = read_u32(&mut input)? as usize;
        let mut b = [0u8; 2];
        for _ in 0..n {
            input.read_exact(&mut b)?;
            prog.image.push(u16::from_le_bytes(b));
        }
        Ok(prog)
    }

    /// One line per op, with layer and step markers as comments and the
    /// descriptor table at the end.
    pub fn disassembly(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "; format {} model {}", self.meta.format, self.meta.model_hash);
        for (i, op) in self.ops.iter().enumerate() {
            for l in self.layers.iter().filter(|l| l.start == i) {
                let _ = writeln!(s, "; layer {}", l.name);
            }
            for g in self.groups.iter().filter(|g| g.start == i) {
                let _ = writeln!(s, "; step {} of {}", g.step, g.layer);
            }
            let _ = writeln!(s, "{}", op_line(i, op));
        }
        for (i, d) in self.descriptors.iter().enumerate() {
            let _ = writeln!(s, "#{} = {}", i + 1, describe(d));
        }
        s
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, IsaError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn field(id: u32) -> String {
    if id == 0 {
        "-".into()
    } else {
        format!("#{id}")
    }
}

/// `00012 CONV_FLOW  z.r. lanes=16 #3 #4 #5`
pub fn op_line(i: usize, op: &MicroOp) -> String {
    let f = op.flags;
    let flags: String = [(f.zero_skip, 'z'), (f.accumulate, 'a'), (f.finalize_round, 'r'), (f.dilated, 'd')]
        .iter()
        .map(|&(on, c)| if on { c } else { '.' })
        .collect();
    format!("{i:05} {:<10} {flags} lanes={:<2} {} {} {}", op.kind.mnemonic(), op.lanes, field(op.src0), field(op.src1), field(op.dst))
}

fn view(v: &MapView) -> String {
    let a = &v.alloc;
    format!(
        "data[o{} n{} @{}] c{}+{} p{}+{}{}{}",
        a.offset,
        a.nbanks,
        a.base,
        v.c0,
        v.channels,
        v.p0,
        v.len,
        if v.transposed { " T" } else { "" },
        if v.negate { " neg" } else { "" }
    )
}

fn region(r: &Region) -> String {
    format!("{:?}.{}[{}+{}]", r.sram, if r.half == 0 { "ping" } else { "pong" }, r.base, r.count).to_lowercase()
}

pub fn describe(d: &Descriptor) -> String {
    match d {
        Descriptor::Map(v) => view(v),
        Descriptor::Region(r) => region(r),
        Descriptor::Ext(e) => format!("ext {:?} x{}", e.stream, e.count),
        Descriptor::Conv { shape: s, weights, bias, relu } => format!(
            "conv {}->{} k{} s{} d{} pad{} up{} len {}->{} w {} b {}{}",
            s.cin,
            s.cout,
            s.k,
            s.stride,
            s.dilation,
            s.pad,
            s.upsample,
            s.in_len,
            s.out_len,
            region(weights),
            region(bias),
            if *relu { " relu" } else { "" }
        ),
        Descriptor::Scaled { out, scale } => {
            format!("{}{}", view(out), scale.map(|r| format!(" scale {}", region(&r))).unwrap_or_default())
        }
        Descriptor::Affine { params, relu } => format!("affine {}{}", region(params), if *relu { " relu" } else { "" }),
        Descriptor::Norm { pass, stats, params, inv_c } => {
            format!("norm {:?} stats {} params {} inv {}", pass, view(stats), region(params), region(inv_c))
        }
        Descriptor::Lut(k) => format!("lut {k:?}"),
    }
}
