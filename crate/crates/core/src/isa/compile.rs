//! Compiler from the deployed network to a micro-op program.
//!
//! The frame program is built in two phases. The first walks the network
//! in execution order, places feature maps in the data banks and emits
//! compute ops whose parameters live in per-op bundles. The second packs
//! bundles into ping-pong groups that fit one half of the weight and bias
//! SRAMs, lays out the parameter image and interleaves the group loads:
//! group `g + 1` streams in while group `g` computes, with a BARRIER before
//! each group's first op.

use sha2::{Digest, Sha256};

use super::desc::{Alloc, ConvShape, Descriptor, ExtRef, MapView, NormPass, Region, Stream};
use super::op::{Flags, MicroOp, OpKind, MAX_LANES};
use super::pattern::{Geometry, Sram, DATA_BANKS, LANES};
use super::program::{GroupSpan, LayerSpan, Program, ProgramMeta};
use super::IsaError;
use crate::model::{Affine, AttentionOrder, Conv, ModelConfig, Net, Norm, Weights};
use crate::numerics::{ActKind, Format};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompileOptions {
    /// Set the zero-skip flag on MAC ops.
    pub zero_skip: bool,
}

impl Default for CompileOptions {
    fn default() -> Self {
        Self { zero_skip: true }
    }
}

/// Compile a config and raw weights for one number format.
pub fn compile(cfg: &ModelConfig, weights: &Weights, fmt: Format, opts: &CompileOptions) -> Result<Program, IsaError> {
    let net = Net::from_weights(cfg, weights)?.quantize(fmt);
    compile_net(&net, fmt, opts)
}

/// Compile an already quantized network.
pub fn compile_net(net: &Net<u16>, fmt: Format, opts: &CompileOptions) -> Result<Program, IsaError> {
    let mut c = Compiler::new(fmt, *opts);
    c.network(net)?;
    c.finish(net)
}

/// First-fit placement of feature maps over the data banks.
#[derive(Debug, Clone)]
struct DataMem {
    cap: u32,
    used: [Vec<(u32, u32)>; DATA_BANKS],
}

impl DataMem {
    fn new(cap: u32) -> Self {
        Self { cap, used: Default::default() }
    }

    fn alloc(&mut self, channels: usize, len: usize, nbanks: usize, offset: usize) -> Result<Alloc, IsaError> {
        self.place(channels, len, nbanks, offset, false)
    }

    /// Highest-fit placement, keeping the low free space contiguous.
    fn alloc_high(&mut self, channels: usize, len: usize, nbanks: usize, offset: usize) -> Result<Alloc, IsaError> {
        self.place(channels, len, nbanks, offset, true)
    }

    fn place(&mut self, channels: usize, len: usize, nbanks: usize, offset: usize, high: bool) -> Result<Alloc, IsaError> {
        let mut a = Alloc { offset: offset as u8, nbanks: nbanks as u8, base: 0, channels: channels as u32, len: len as u32 };
        let n = a.words_per_bank();
        let banks: Vec<usize> = a.banks().collect();
        let mut cands: Vec<u32> = vec![0, self.cap.saturating_sub(n)];
        for &b in &banks {
            for &(s, e) in &self.used[b] {
                cands.push(e);
                cands.push(s.saturating_sub(n));
            }
        }
        cands.sort_unstable();
        if high {
            cands.reverse();
        }
        let free = |base: u32| banks.iter().all(|&b| self.used[b].iter().all(|&(s, e)| base + n <= s || base >= e));
        let base = cands.into_iter().find(|&base| base + n <= self.cap && free(base)).ok_or_else(|| {
            IsaError::Capacity(format!("no room for a [{channels}, {len}] map in {nbanks} data banks of {} words", self.cap))
        })?;
        a.base = base;
        for &b in &banks {
            self.used[b].push((base, base + n));
        }
        Ok(a)
    }

    fn free(&mut self, a: &Alloc) {
        let span = (a.base, a.base + a.words_per_bank());
        for b in a.banks().collect::<Vec<_>>() {
            if let Some(i) = self.used[b].iter().position(|&s| s == span) {
                self.used[b].swap_remove(i);
            }
        }
    }
}

/// Parameters read by one op.
#[derive(Debug, Clone, Default)]
struct Bundle {
    op: usize,
    weights: Vec<u16>,
    bias: Vec<u16>,
    descs: Vec<u32>,
}

struct Compiler {
    fmt: Format,
    geo: Geometry,
    opts: CompileOptions,
    prog: Program,
    ops: Vec<MicroOp>,
    bundles: Vec<Bundle>,
    pending: Bundle,
    mem: DataMem,
    layer: Option<(String, usize)>,
    step: Option<(String, u8, usize)>,
    input: u32,
    output: u32,
}

fn lanes(n: usize) -> u8 {
    n.min(MAX_LANES as usize) as u8
}

impl Compiler {
    fn new(fmt: Format, opts: CompileOptions) -> Self {
        let geo = Geometry::for_format(fmt);
        let prog = Program {
            meta: ProgramMeta { format: fmt.to_string(), model_hash: String::new(), config: String::new(), weight_groups: 0 },
            descriptors: Vec::new(),
            ops: Vec::new(),
            layers: Vec::new(),
            groups: Vec::new(),
            image: Vec::new(),
        };
        Self {
            fmt,
            geo,
            opts,
            prog,
            ops: Vec::new(),
            bundles: Vec::new(),
            pending: Bundle::default(),
            mem: DataMem::new(geo.data_words),
            layer: None,
            step: None,
            input: 0,
            output: 0,
        }
    }

    // ---- markers ----

    fn begin_layer(&mut self, name: &str) {
        self.end_layer();
        self.layer = Some((name.to_string(), self.ops.len()));
    }

    fn end_layer(&mut self) {
        if let Some((name, start)) = self.layer.take() {
            if self.ops.len() > start {
                self.prog.layers.push(LayerSpan { name, start, end: self.ops.len() });
            }
        }
    }

    fn begin_step(&mut self, layer: &str, step: u8) {
        self.end_step();
        self.step = Some((layer.to_string(), step, self.ops.len()));
    }

    fn end_step(&mut self) {
        if let Some((layer, step, start)) = self.step.take() {
            if self.ops.len() > start {
                self.prog.groups.push(GroupSpan { layer, step, start, end: self.ops.len() });
            }
        }
    }

    // ---- descriptors and parameters ----

    fn desc(&mut self, d: Descriptor) -> Result<u32, IsaError> {
        self.prog.push_desc(d)
    }

    fn map(&mut self, v: MapView) -> Result<u32, IsaError> {
        self.desc(Descriptor::Map(v))
    }

    /// Descriptor whose regions belong to the next emitted op's bundle.
    fn param_desc(&mut self, d: Descriptor) -> Result<u32, IsaError> {
        let id = self.desc(d)?;
        self.pending.descs.push(id);
        Ok(id)
    }

    fn weights(&mut self, words: &[u16]) -> Region {
        let r = Region { sram: Sram::Weight, half: 0, base: self.pending.weights.len() as u32, count: words.len() as u32 };
        self.pending.weights.extend_from_slice(words);
        r
    }

    fn bias(&mut self, words: &[u16]) -> Region {
        let r = Region { sram: Sram::Bias, half: 0, base: self.pending.bias.len() as u32, count: words.len() as u32 };
        self.pending.bias.extend_from_slice(words);
        r
    }

    fn emit(&mut self, kind: OpKind, flags: Flags, lanes: u8, src0: u32, src1: u32, dst: u32) {
        let op = self.ops.len();
        if !self.pending.descs.is_empty() {
            let mut b = std::mem::take(&mut self.pending);
            b.op = op;
            self.bundles.push(b);
        }
        self.ops.push(MicroOp { kind, flags, lanes, src0, src1, dst });
    }

    fn round_flags(&self) -> Flags {
        Flags { finalize_round: true, ..Flags::default() }
    }

    fn mac_flags(&self, accumulate: bool) -> Flags {
        Flags { zero_skip: self.opts.zero_skip, accumulate, finalize_round: true, dilated: false }
    }

    // ---- compute ops ----

    /// Output channels `lo..hi` of `cv` from `x` into `dst` (a view of
    /// exactly those channels), tiled so each tile's weights fit a half.
    fn conv_rows(&mut self, x: MapView, cv: &Conv<u16>, lo: usize, hi: usize, dst: MapView, accumulate: bool) -> Result<(), IsaError> {
        let g = cv.geom;
        let per = g.cin * g.k;
        let wcap = self.geo.half_capacity(Sram::Weight) as usize;
        let bcap = self.geo.half_capacity(Sram::Bias) as usize;
        let max_rows = (wcap / per).min(bcap);
        if max_rows == 0 {
            return Err(IsaError::Capacity(format!("one output channel of a {}x{}x{} conv exceeds a weight half", g.cout, g.cin, g.k)));
        }
        let rows = hi - lo;
        let tiles = rows.div_ceil(max_rows);
        let mut tile = rows.div_ceil(tiles);
        if tile % 2 == 1 && tile < max_rows && tile < rows {
            tile += 1;
        }
        let mut o = lo;
        while o < hi {
            let n = tile.min(hi - o);
            self.conv_tile(x, cv, o, o + n, dst.channel_range((o - lo) as u32, n as u32), accumulate)?;
            o += n;
        }
        Ok(())
    }

    fn conv_tile(&mut self, x: MapView, cv: &Conv<u16>, lo: usize, hi: usize, dst: MapView, accumulate: bool) -> Result<(), IsaError> {
        let g = cv.geom;
        let per = g.cin * g.k;
        let mut shape = ConvShape::from(g);
        shape.cout = (hi - lo) as u32;
        let src = self.map(x)?;
        let out = self.map(dst)?;
        let weights = self.weights(&cv.w[lo * per..hi * per]);
        let bias = self.bias(&cv.b[lo..hi]);
        let relu = cv.relu && cv.post.is_none();
        let wd = self.param_desc(Descriptor::Conv { shape, weights, bias, relu })?;
        let flags = Flags { dilated: g.dilation > 1, ..self.mac_flags(accumulate) };
        self.emit(OpKind::ConvFlow, flags, lanes(g.cin.min(LANES) * (hi - lo).min(2)), src, wd, out);
        if let Some(aff) = &cv.post {
            self.affine(dst, aff, lo, hi, cv.relu)?;
        }
        Ok(())
    }

    fn conv(&mut self, x: MapView, cv: &Conv<u16>, dst: MapView, accumulate: bool) -> Result<(), IsaError> {
        self.conv_rows(x, cv, 0, cv.geom.cout, dst, accumulate)
    }

    /// In-place affine over `x` with channels `lo..hi` of `aff`.
    fn affine(&mut self, x: MapView, aff: &Affine<u16>, lo: usize, hi: usize, relu: bool) -> Result<(), IsaError> {
        let src = self.map(x)?;
        let words: Vec<u16> = aff.scale[lo..hi].iter().chain(&aff.shift[lo..hi]).copied().collect();
        let params = self.bias(&words);
        let pd = self.param_desc(Descriptor::Affine { params, relu })?;
        self.emit(OpKind::NormPass, self.round_flags(), lanes(x.len as usize), src, pd, src);
        Ok(())
    }

    fn layer_norm(&mut self, x: MapView, gamma: &[u16], beta: &[u16], inv_c: u16) -> Result<(), IsaError> {
        let stats = self.mem.alloc(2, x.len as usize, DATA_BANKS, 0)?;
        let src = self.map(x)?;
        let empty = Region { sram: Sram::Bias, half: 0, base: 0, count: 0 };
        for pass in [NormPass::Mean, NormPass::Var, NormPass::Normalize] {
            let inv = self.bias(&[inv_c]);
            let params = if pass == NormPass::Normalize {
                let words: Vec<u16> = gamma.iter().chain(beta).copied().collect();
                self.bias(&words)
            } else {
                empty
            };
            let pd = self.param_desc(Descriptor::Norm { pass, stats: stats.view(), params, inv_c: inv })?;
            let dst = if pass == NormPass::Normalize { src } else { 0 };
            self.emit(OpKind::NormPass, self.round_flags(), lanes(x.len as usize), src, pd, dst);
        }
        self.mem.free(&stats);
        Ok(())
    }

    fn norm(&mut self, x: MapView, n: &Norm<u16>, inv_c: u16) -> Result<(), IsaError> {
        match n {
            Norm::Affine(aff) => self.affine(x, aff, 0, aff.scale.len(), false),
            Norm::Layer { gamma, beta } => self.layer_norm(x, gamma, beta, inv_c),
        }
    }

    /// `dst = a + b` (or a bypass copy of `a` when `b` is `None`).
    fn ew_add(&mut self, a: MapView, b: Option<MapView>, dst: MapView) -> Result<(), IsaError> {
        let s0 = self.map(a)?;
        let s1 = match b {
            Some(b) => self.map(b)?,
            None => 0,
        };
        let d = self.map(dst)?;
        let flags = if b.is_some() { self.round_flags() } else { Flags::default() };
        self.emit(OpKind::EwAdd, flags, lanes(a.len as usize), s0, s1, d);
        Ok(())
    }

    /// `dst = [dst +] m · n`, `m` gated.
    fn ew_mul(&mut self, m: MapView, n: MapView, dst: MapView, accumulate: bool) -> Result<(), IsaError> {
        let (s0, s1, d) = (self.map(m)?, self.map(n)?, self.map(dst)?);
        self.emit(OpKind::EwMul, self.mac_flags(accumulate), lanes(m.len as usize), s0, s1, d);
        Ok(())
    }

    fn act(&mut self, x: MapView, kind: ActKind) -> Result<(), IsaError> {
        let s = self.map(x)?;
        let k = self.desc(Descriptor::Lut(kind))?;
        self.emit(OpKind::ActLut, self.round_flags(), lanes(x.len as usize), s, k, s);
        Ok(())
    }

    /// `out(y, x) = [scale ·] Σ_j a(x, j) · b(y, j)`.
    fn mm(&mut self, a: MapView, b: MapView, out: MapView, scale: Option<u16>) -> Result<(), IsaError> {
        if a.cols() != b.cols() || out.rows() != b.rows() || out.cols() != a.rows() {
            return Err(IsaError::BadDescriptor("matmul operand shapes disagree".into()));
        }
        let (s0, s1) = (self.map(a)?, self.map(b)?);
        let d = match scale {
            Some(s) => {
                let r = self.bias(&[s]);
                self.param_desc(Descriptor::Scaled { out, scale: Some(r) })?
            }
            None => self.desc(Descriptor::Scaled { out, scale: None })?,
        };
        let l = (b.rows() as usize).min(LANES) * (a.rows() as usize).min(2);
        self.emit(OpKind::MmFlow, self.mac_flags(false), lanes(l), s0, s1, d);
        Ok(())
    }

    // ---- network ----

    fn drb(&mut self, x: &Alloc, stages: &[Conv<u16>], t_offset: usize) -> Result<(), IsaError> {
        let half = x.channels as usize / 2;
        let y = x.view().channel_range(0, half as u32);
        let t = self.mem.alloc(half, x.len as usize, DATA_BANKS, t_offset)?;
        for st in stages {
            self.conv(y, st, t.view(), false)?;
            self.ew_add(y, Some(t.view()), y)?;
        }
        self.mem.free(&t);
        Ok(())
    }

    fn attention(&mut self, net: &Net<u16>, q: &Alloc, k: &Alloc, v: &Alloc, att: &Alloc, i: usize) -> Result<(), IsaError> {
        let cfg = &net.cfg;
        let (w, h) = (cfg.head_dim as u32, cfg.subband_len);
        let head = |a: &Alloc, hd: usize| a.view().channel_range(hd as u32 * w, w);
        let mha = format!("tb{i}.mha");
        match cfg.attention_order {
            AttentionOrder::Reordered => {
                let mut st = Vec::new();
                self.begin_step(&mha, 2);
                for hd in 0..cfg.heads {
                    let s = self.mem.alloc(w as usize, w as usize, 4, (q.offset as usize + 4) % DATA_BANKS)?;
                    self.mm(head(k, hd), head(v, hd), s.view(), net.attn_scale)?;
                    st.push(s);
                }
                self.begin_step(&mha, 3);
                for (hd, s) in st.iter().enumerate() {
                    self.mm(head(q, hd).transposed(), s.view(), head(att, hd), None)?;
                }
                for s in &st {
                    self.mem.free(s);
                }
            }
            AttentionOrder::Direct => {
                let mut chunk = h;
                let am = loop {
                    match self.mem.alloc(h, chunk, 4, (q.offset as usize + 4) % DATA_BANKS) {
                        Ok(a) => break a,
                        Err(e) if chunk <= 1 => return Err(e),
                        Err(_) => chunk = chunk.div_ceil(2),
                    }
                };
                for hd in 0..cfg.heads {
                    let mut i0 = 0;
                    while i0 < h {
                        let n = chunk.min(h - i0) as u32;
                        let amv = am.view().position_range(0, n);
                        self.begin_step(&mha, 2);
                        self.mm(head(q, hd).position_range(i0 as u32, n).transposed(), head(k, hd).transposed(), amv, net.attn_scale)?;
                        self.begin_step(&mha, 3);
                        self.mm(amv.transposed(), head(v, hd), head(att, hd).position_range(i0 as u32, n), None)?;
                        i0 += chunk;
                    }
                }
                self.mem.free(&am);
            }
        }
        self.end_step();
        Ok(())
    }

    fn block(&mut self, net: &Net<u16>, i: usize, x: &Alloc, hid: &Alloc) -> Result<(), IsaError> {
        let cfg = &net.cfg;
        let blk = &net.blocks[i];
        let (e, h) = (cfg.embed_dim, cfg.subband_len);
        let name = |s: &str| format!("tb{i}.{s}");

        self.begin_layer(&name("qkv"));
        self.begin_step(&name("mha"), 1);
        let q = self.mem.alloc(e, h, 4, 4)?;
        let k = self.mem.alloc(e, h, 4, 0)?;
        let v = self.mem.alloc(e, h, 4, 4)?;
        for (j, a) in [q, k, v].iter().enumerate() {
            self.conv_rows(x.view(), &blk.qkv, j * e, (j + 1) * e, a.view(), false)?;
        }
        self.end_step();

        self.begin_layer(&name("attn"));
        let att = self.mem.alloc(e, h, DATA_BANKS, 0)?;
        self.attention(net, &q, &k, &v, &att, i)?;
        for a in [&q, &k, &v] {
            self.mem.free(a);
        }

        self.begin_layer(&name("out_proj"));
        let o = self.mem.alloc(e, h, DATA_BANKS, (x.offset as usize + 4) % DATA_BANKS)?;
        self.conv(att.view(), &blk.out, o.view(), false)?;
        self.mem.free(&att);

        self.begin_layer(&name("addnorm1"));
        self.ew_add(x.view(), Some(o.view()), x.view())?;
        self.mem.free(&o);
        self.norm(x.view(), &blk.norm1, net.inv_embed)?;

        self.begin_layer(&name("gru"));
        self.gru(net, i, x, hid)?;

        self.begin_layer(&name("ffn"));
        let f = self.mem.alloc(e, h, DATA_BANKS, (x.offset as usize + 4) % DATA_BANKS)?;
        self.conv(hid.view(), &blk.ffn, f.view(), false)?;

        self.begin_layer(&name("addnorm2"));
        self.ew_add(x.view(), Some(f.view()), x.view())?;
        self.mem.free(&f);
        self.norm(x.view(), &blk.norm2, net.inv_embed)?;
        Ok(())
    }

    /// The five GRU steps; the new state overwrites `hid`.
    fn gru(&mut self, net: &Net<u16>, i: usize, x: &Alloc, hid: &Alloc) -> Result<(), IsaError> {
        let g = &net.blocks[i].gru;
        let (hd, h) = (g.hidden as u32, net.cfg.subband_len);
        let layer = format!("tb{i}.gru");
        let gi = self.mem.alloc(3 * g.hidden, h, DATA_BANKS, (hid.offset as usize + 4) % DATA_BANKS)?;
        let hn = self.mem.alloc(g.hidden, h, DATA_BANKS, hid.offset as usize)?;
        let (r, z, n) = (gi.view().channel_range(0, hd), gi.view().channel_range(hd, hd), gi.view().channel_range(2 * hd, hd));

        self.begin_step(&layer, 1);
        self.conv(x.view(), &g.w_ih, gi.view(), false)?;
        self.begin_step(&layer, 2);
        self.conv(hid.view(), &g.w_hr, r, true)?;
        self.act(r, ActKind::Sigmoid)?;
        self.begin_step(&layer, 3);
        self.conv(hid.view(), &g.w_hz, z, true)?;
        self.act(z, ActKind::Sigmoid)?;
        self.begin_step(&layer, 4);
        self.conv(hid.view(), &g.w_hn, hn.view(), false)?;
        self.ew_mul(r, hn.view(), n, true)?;
        self.act(n, ActKind::Tanh)?;
        self.begin_step(&layer, 5);
        self.ew_add(hid.view(), Some(n.negated()), hn.view())?;
        self.ew_mul(z, hn.view(), n, true)?;
        self.ew_add(n, None, hid.view())?;
        self.end_step();

        self.mem.free(&hn);
        self.mem.free(&gi);
        Ok(())
    }

    fn network(&mut self, net: &Net<u16>) -> Result<(), IsaError> {
        let cfg = &net.cfg;
        let (f, h, c, half, e) = (cfg.freq_bins, cfg.subband_len, cfg.enc_channels, cfg.half_channels(), cfg.embed_dim);
        let hids: Vec<Alloc> =
            (0..cfg.num_transformer_blocks).map(|_| self.mem.alloc(cfg.gru_hidden, h, DATA_BANKS, 4)).collect::<Result<_, _>>()?;

        self.begin_layer("enc_in");
        let e1 = self.mem.alloc(c, f, DATA_BANKS, 0)?;
        let inp = self.mem.alloc(1, f, 1, DATA_BANKS - 1)?;
        self.input = self.map(inp.view())?;
        self.conv(inp.view(), &net.enc_in, e1.view(), false)?;
        self.mem.free(&inp);

        self.begin_layer("enc_down");
        let enc = self.mem.alloc(c, h, DATA_BANKS, 0)?;
        self.conv(e1.view(), &net.enc_down, enc.view(), false)?;
        self.mem.free(&e1);

        self.begin_layer("enc_drb");
        self.drb(&enc, &net.enc_drb, 4)?;

        self.begin_layer("tr_in");
        let x = self.mem.alloc(e, h, DATA_BANKS, 0)?;
        self.conv(enc.view(), &net.tr_in, x.view(), false)?;

        for (i, hid) in hids.iter().enumerate() {
            self.block(net, i, &x, hid)?;
        }

        self.begin_layer("mask");
        let m1 = self.mem.alloc_high(c, h, DATA_BANKS, 0)?;
        self.conv(x.view(), &net.mask1, m1.view(), false)?;
        self.mem.free(&x);
        let m2 = self.mem.alloc(c, h, DATA_BANKS, (enc.offset as usize + 4) % DATA_BANKS)?;
        self.conv(m1.view(), &net.mask2, m2.view(), false)?;
        self.mem.free(&m1);
        self.ew_mul(m2.view(), enc.view(), m2.view(), false)?;
        self.mem.free(&enc);

        self.begin_layer("dec_drb");
        self.drb(&m2, &net.dec_drb, (m2.offset as usize + 4) % DATA_BANKS)?;

        self.begin_layer("dec_up");
        let u = self.mem.alloc(half, f, DATA_BANKS, 0)?;
        self.conv(m2.view(), &net.dec_up, u.view(), false)?;
        self.mem.free(&m2);

        self.begin_layer("dec_out");
        let y = self.mem.alloc(1, f, 1, 0)?;
        self.conv(u.view(), &net.dec_out, y.view(), false)?;
        self.mem.free(&u);
        self.end_layer();
        self.output = self.map(y.view())?;
        Ok(())
    }

    /// Pack bundles into groups, lay out the image and insert DMA/BARRIER ops.
    fn finish(mut self, net: &Net<u16>) -> Result<Program, IsaError> {
        let (wcap, bcap) = (self.geo.half_capacity(Sram::Weight) as usize, self.geo.half_capacity(Sram::Bias) as usize);
        // group index per bundle and the bundle's base in its group
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let (mut wfill, mut bfill) = (0usize, 0usize);
        let mut base = vec![(0u32, 0u32); self.bundles.len()];
        for (bi, b) in self.bundles.iter().enumerate() {
            if b.weights.len() > wcap || b.bias.len() > bcap {
                return Err(IsaError::Capacity(format!("op {} needs more parameters than one ping-pong half", b.op)));
            }
            if groups.is_empty() || wfill + b.weights.len() > wcap || bfill + b.bias.len() > bcap {
                groups.push(Vec::new());
                wfill = 0;
                bfill = 0;
            }
            base[bi] = (wfill as u32, bfill as u32);
            wfill += b.weights.len();
            bfill += b.bias.len();
            groups.last_mut().unwrap().push(bi);
        }
        for (g, members) in groups.iter().enumerate() {
            for &bi in members {
                for &id in &self.bundles[bi].descs {
                    for r in regions_mut(&mut self.prog.descriptors[id as usize - 1]) {
                        r.half = (g % 2) as u8;
                        r.base += if r.sram == Sram::Weight { base[bi].0 } else { base[bi].1 };
                    }
                }
            }
        }

        // image: per group, all weights then all biases
        let mut loads: Vec<Vec<(Stream, Region)>> = Vec::new();
        for (g, members) in groups.iter().enumerate() {
            let half = (g % 2) as u8;
            let mut l = Vec::new();
            for sram in [Sram::Weight, Sram::Bias] {
                let offset = self.prog.image.len() as u32;
                for &bi in members {
                    let b = &self.bundles[bi];
                    self.prog.image.extend_from_slice(if sram == Sram::Weight { &b.weights } else { &b.bias });
                }
                let count = self.prog.image.len() as u32 - offset;
                if count > 0 {
                    l.push((Stream::Image { offset }, Region { sram, half, base: 0, count }));
                }
            }
            loads.push(l);
        }
        let group_start: Vec<usize> = groups.iter().map(|m| self.bundles[m[0]].op).collect();

        let body = std::mem::take(&mut self.ops);
        let f = net.cfg.freq_bins as u32;
        let mut out: Vec<MicroOp> = Vec::new();
        let mut pos = vec![0usize; body.len() + 1];
        let dma = |c: &mut Compiler, out: &mut Vec<MicroOp>, kind: OpKind, src: Descriptor, dst: Descriptor| -> Result<(), IsaError> {
            let s = c.desc(src)?;
            let d = c.desc(dst)?;
            out.push(MicroOp { kind, flags: Flags::default(), lanes: 0, src0: s, src1: 0, dst: d });
            Ok(())
        };
        let input = *self.prog.map(self.input)?;
        dma(&mut self, &mut out, OpKind::DmaLoad, Descriptor::Ext(ExtRef { stream: Stream::Input, count: f }), Descriptor::Map(input))?;
        let mut next = 0;
        for (i, op) in body.iter().enumerate() {
            while next < groups.len() && group_start[next] == i {
                if next > 0 {
                    out.push(MicroOp::barrier());
                }
                let issue = if next == 0 { 0..2.min(groups.len()) } else { next + 1..(next + 2).min(groups.len()) };
                for g in issue {
                    for &(s, r) in &loads[g] {
                        dma(&mut self, &mut out, OpKind::DmaLoad, Descriptor::Ext(ExtRef { stream: s, count: r.count }), Descriptor::Region(r))?;
                    }
                    if next == 0 && g == 0 {
                        out.push(MicroOp::barrier());
                    }
                }
                next += 1;
            }
            pos[i] = out.len();
            out.push(*op);
        }
        if groups.is_empty() {
            out.insert(1, MicroOp::barrier());
            pos.iter_mut().for_each(|p| *p += 1);
        }
        pos[body.len()] = out.len();
        let output = *self.prog.map(self.output)?;
        dma(&mut self, &mut out, OpKind::DmaStore, Descriptor::Map(output), Descriptor::Ext(ExtRef { stream: Stream::Output, count: f }))?;
        out.push(MicroOp::barrier());

        let remap = |s: usize, e: usize| (pos[s], pos[e - 1] + 1);
        for l in &mut self.prog.layers {
            (l.start, l.end) = remap(l.start, l.end);
        }
        for g in &mut self.prog.groups {
            (g.start, g.end) = remap(g.start, g.end);
        }
        self.prog.ops = out;
        self.prog.meta.weight_groups = groups.len();
        self.prog.meta.config = net.cfg.to_text();
        let mut sha = Sha256::new();
        sha.update(self.prog.meta.config.as_bytes());
        sha.update(self.fmt.to_string().as_bytes());
        for w in &self.prog.image {
            sha.update(w.to_le_bytes());
        }
        self.prog.meta.model_hash = format!("{:x}", sha.finalize());
        Ok(self.prog)
    }
}

fn regions_mut(d: &mut Descriptor) -> Vec<&mut Region> {
    match d {
        Descriptor::Conv { weights, bias, .. } => vec![weights, bias],
        Descriptor::Scaled { scale: Some(s), .. } => vec![s],
        Descriptor::Affine { params, .. } => vec![params],
        Descriptor::Norm { params, inv_c, .. } => vec![params, inv_c],
        Descriptor::Region(r) => vec![r],
        _ => Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_fit_reuses_freed_space() {
        let mut m = DataMem::new(100);
        let a = m.alloc(8, 10, 8, 0).unwrap();
        let b = m.alloc(8, 10, 8, 0).unwrap();
        assert_eq!((a.base, b.base), (0, 10));
        m.free(&a);
        let c = m.alloc(4, 10, 4, 4).unwrap();
        assert_eq!(c.base, 0);
        let d = m.alloc(1, 5, 1, 0).unwrap();
        assert_eq!(d.base, 0);
        assert!(m.alloc(8, 90, 8, 0).is_err());
    }

    use crate::model::{layer_macs, NormMode};

    fn prog(cfg: &ModelConfig, fmt: Format) -> Result<Program, IsaError> {
        compile(cfg, &Weights::random(cfg, 7), fmt, &CompileOptions::default())
    }

    #[test]
    fn default_program_is_well_formed() {
        let cfg = ModelConfig::default();
        let p = prog(&cfg, Format::FP10).unwrap();
        p.check_addresses().unwrap();
        assert!(p.meta.weight_groups >= 2);
        assert_eq!(p.ops.first().unwrap().kind, OpKind::DmaLoad);
        assert_eq!(p.ops.last().unwrap().kind, OpKind::Barrier);
        assert_eq!(p.ops[p.ops.len() - 2].kind, OpKind::DmaStore);
        for l in &p.layers {
            assert!(l.start < l.end && l.end <= p.ops.len());
        }
    }

    #[test]
    fn scheduled_groups() {
        let cfg = ModelConfig::default();
        let p = prog(&cfg, Format::FP10).unwrap();
        for i in 0..cfg.num_transformer_blocks {
            let steps = |l: &str| {
                let mut v: Vec<u8> = p.groups.iter().filter(|g| g.layer == format!("tb{i}.{l}")).map(|g| g.step).collect();
                v.dedup();
                v
            };
            assert_eq!(steps("gru"), vec![1, 2, 3, 4, 5]);
            assert_eq!(steps("mha"), vec![1, 2, 3]);
        }
    }

    #[test]
    fn norm_passes_per_mode() {
        let norm_ops = |cfg: &ModelConfig, layer: &str| {
            let p = prog(cfg, Format::FP10).unwrap();
            let s = p.layers.iter().find(|l| l.name == layer).unwrap();
            (s.start..s.end).filter(|&i| p.ops[i].kind == OpKind::NormPass).count()
        };
        let bn = ModelConfig { norm: NormMode::Bn, ..ModelConfig::default() };
        let ln = ModelConfig { norm: NormMode::Ln, ..ModelConfig::default() };
        assert_eq!(norm_ops(&bn, "tb0.addnorm1"), 1);
        assert_eq!(norm_ops(&ln, "tb0.addnorm1"), 3);
    }

    #[test]
    fn static_macs_match_layer_counts() {
        for order in [AttentionOrder::Reordered, AttentionOrder::Direct] {
            let cfg = ModelConfig { attention_order: order, ..ModelConfig::default() };
            let p = prog(&cfg, Format::FP10).unwrap();
            let got = p.macs_by_layer().unwrap();
            for (name, m) in layer_macs(&cfg) {
                let g = got.iter().find(|(n, _)| *n == name).map(|e| e.1).unwrap_or(0);
                assert_eq!(g, m, "{name} {order:?}");
            }
        }
    }

    #[test]
    fn binary_round_trip() {
        let p = prog(&ModelConfig::default(), Format::FP10).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(Program::read_from(buf.as_slice()).unwrap(), p);
        buf[0] = b'X';
        assert!(Program::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn fp16_does_not_fit() {
        assert!(matches!(prog(&ModelConfig::default(), Format::FP16), Err(IsaError::Capacity(_))));
    }
}

