//! Deterministic executor for loaded images: permissioned sparse memory,
//! guard pages, provenance-checked privileged writes, and AEX injection.

use std::collections::{BTreeMap, HashMap, VecDeque};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bundle::PolicyManifest;
use crate::instrument::{link, InstrumentError, Program};
use crate::isa::{decode_instruction, Instruction, Mem, Mnemonic, Operand, Reg};
use crate::loader::{load, EnclaveLayout, LoadError, LoadedImage, Region, TrustedRange, TrustedRole, PAGE};
use crate::templates::{SSA_COUNT_OFFSET, SSA_LAST_OFFSET, SSA_MARKER, SSA_MARKER_OFFSET};

pub const PERM_R: u8 = 1;
pub const PERM_W: u8 = 2;
pub const PERM_X: u8 = 4;
pub const DEFAULT_STEP_LIMIT: u64 = 20_000_000;
/// Largest message a single host call may carry.
pub const MAX_HOST_MESSAGE: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionRole {
    Code,
    Data,
    StackGuard,
    Stack,
    Shadow,
    TargetTable,
    Ssa,
    LoaderHeap,
    Gateway,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemRegion {
    pub region: Region,
    pub perms: u8,
    pub role: RegionRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    GuardPage,
    Perm,
    Unmapped,
    Gateway,
    Undecodable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Completed,
    Violation(u32),
    Fault(FaultKind),
    StepLimit,
}

impl Status {
    /// Process exit code used by the command-line runner.
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Completed => 0,
            Status::Violation(_) => 3,
            Status::Fault(_) => 4,
            Status::StepLimit => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Flags {
    pub zf: bool,
    pub cf: bool,
    pub sf: bool,
    pub of: bool,
}

impl Flags {
    fn to_bits(self) -> u64 {
        2 | self.cf as u64 | (self.zf as u64) << 6 | (self.sf as u64) << 7 | (self.of as u64) << 11
    }

    fn from_bits(v: u64) -> Flags {
        Flags { cf: v & 1 != 0, zf: v & 1 << 6 != 0, sf: v & 1 << 7 != 0, of: v & 1 << 11 != 0 }
    }

    fn logic(result: u64) -> Flags {
        Flags { zf: result == 0, sf: (result as i64) < 0, cf: false, of: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteRecord {
    pub step: u64,
    pub addr: u64,
    pub len: u64,
    pub rip: u64,
    pub trusted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EmuError {
    #[error("input of {size} bytes exceeds the {capacity}-byte data region")]
    DataTooLarge { size: usize, capacity: u64 },
    #[error(transparent)]
    Instrument(#[from] InstrumentError),
    #[error(transparent)]
    Load(#[from] LoadError),
}

/// The host side of the two gateway calls.
pub trait Host {
    fn send(&mut self, message: &[u8]) -> Result<(), String>;
    fn recv(&mut self, capacity: usize) -> Result<Vec<u8>, String>;
}

/// Unlimited host that records sends and serves a fixed inbox.
#[derive(Debug, Clone, Default)]
pub struct RecordingHost {
    pub sent: Vec<Vec<u8>>,
    pub inbox: VecDeque<Vec<u8>>,
}

impl Host for RecordingHost {
    fn send(&mut self, message: &[u8]) -> Result<(), String> {
        self.sent.push(message.to_vec());
        Ok(())
    }

    fn recv(&mut self, capacity: usize) -> Result<Vec<u8>, String> {
        let mut m = self.inbox.pop_front().ok_or("queue empty")?;
        m.truncate(capacity);
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    /// Step index → number of AEXes delivered before that step.
    pub aex_schedule: BTreeMap<u64, u32>,
    pub step_limit: u64,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig { aex_schedule: BTreeMap::new(), step_limit: DEFAULT_STEP_LIMIT }
    }
}

/// Parses one decimal step index per line; repeats mean several AEXes.
pub fn parse_aex_schedule(text: &str) -> Result<BTreeMap<u64, u32>, String> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let step: u64 = line.parse().map_err(|_| format!("line {}: bad step index `{line}`", n + 1))?;
        *out.entry(step).or_insert(0) += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionOutcome {
    pub status: Status,
    pub steps: u64,
    /// Plaintext messages accepted by the host, in order.
    pub outputs: Vec<Vec<u8>>,
    pub data_snapshot: [u8; 32],
    pub write_log: Vec<WriteRecord>,
    pub fault_address: Option<u64>,
}

impl ExecutionOutcome {
    /// Writes by untrusted instructions that landed outside `window`.
    pub fn untrusted_writes_outside(&self, window: Region) -> Vec<WriteRecord> {
        self.write_log
            .iter()
            .filter(|w| !w.trusted && !window.contains_range(w.addr, w.len))
            .copied()
            .collect()
    }

    pub fn writes_to(&self, addr: u64, len: u64) -> usize {
        self.write_log.iter().filter(|w| w.addr < addr + len && addr < w.addr + w.len).count()
    }

    pub fn write_log_text(&self) -> String {
        self.write_log.iter().map(|w| format!("{} 0x{:x} {}\n", w.step, w.addr, w.len)).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Fault {
    kind: FaultKind,
    addr: u64,
}

type Exec<T> = Result<T, Fault>;

pub struct EmuState {
    pub gprs: [u64; 16],
    pub rip: u64,
    pub flags: Flags,
    pub regions: Vec<MemRegion>,
    pub steps: u64,
    pub aex_schedule: BTreeMap<u64, u32>,
    pub write_log: Vec<WriteRecord>,
    pub outputs: Vec<Vec<u8>>,
    pub fault_address: Option<u64>,
    pages: HashMap<u64, Box<[u8; PAGE as usize]>>,
    code: Vec<u8>,
    code_base: u64,
    cache: HashMap<u64, Instruction>,
    trusted: Vec<TrustedRange>,
    layout: EnclaveLayout,
}

fn regions_for(layout: &EnclaveLayout) -> Vec<MemRegion> {
    use RegionRole::*;
    let mut out = vec![
        MemRegion { region: layout.code, perms: PERM_R | PERM_X, role: Code },
        MemRegion { region: layout.data, perms: PERM_R | PERM_W, role: Data },
        MemRegion { region: layout.stack_guard_low, perms: 0, role: StackGuard },
        MemRegion { region: layout.stack, perms: PERM_R | PERM_W, role: Stack },
        MemRegion { region: layout.stack_guard_high, perms: 0, role: StackGuard },
        MemRegion { region: layout.shadow, perms: PERM_R | PERM_W, role: Shadow },
        MemRegion { region: layout.target_table, perms: PERM_R, role: TargetTable },
        MemRegion { region: layout.ssa, perms: PERM_R | PERM_W, role: Ssa },
        MemRegion { region: layout.loader_heap, perms: 0, role: LoaderHeap },
        MemRegion { region: layout.gateway, perms: PERM_X, role: Gateway },
    ];
    out.sort_by_key(|r| r.region.base);
    out
}

impl EmuState {
    /// Maps the image, target table, SSA page and input data; the stack
    /// holds the host-return sentinel and `rdi`/`rsi` carry the data base
    /// and input length.
    pub fn new(img: &LoadedImage, inputs: &[u8], aex_schedule: BTreeMap<u64, u32>) -> Result<EmuState, EmuError> {
        let layout = img.layout.clone();
        if inputs.len() as u64 > layout.data.size {
            return Err(EmuError::DataTooLarge { size: inputs.len(), capacity: layout.data.size });
        }
        let mut st = EmuState {
            gprs: [0; 16],
            rip: img.entry,
            flags: Flags { zf: false, cf: false, sf: false, of: false },
            regions: regions_for(&layout),
            steps: 0,
            aex_schedule,
            write_log: Vec::new(),
            outputs: Vec::new(),
            fault_address: None,
            pages: HashMap::new(),
            code: img.bytes.clone(),
            code_base: img.base,
            cache: HashMap::new(),
            trusted: img.trusted.clone(),
            layout: layout.clone(),
        };
        st.poke(img.base, &img.bytes);
        st.poke(layout.target_table.base, &img.target_table_bytes());
        st.poke(layout.ssa.base + SSA_MARKER_OFFSET, &(SSA_MARKER as u64).to_le_bytes());
        st.poke(layout.data.base, inputs);
        let rsp = layout.stack.end() - 8;
        st.poke(rsp, &layout.host_return().to_le_bytes());
        st.set(Reg::Rsp, rsp);
        st.set(Reg::Rdi, layout.data.base);
        st.set(Reg::Rsi, inputs.len() as u64);
        Ok(st)
    }

    pub fn get(&self, r: Reg) -> u64 {
        self.gprs[r.index() as usize]
    }

    pub fn set(&mut self, r: Reg, v: u64) {
        self.gprs[r.index() as usize] = v;
    }

    /// Raw memory write that bypasses permissions (loader and host use).
    pub fn poke(&mut self, addr: u64, bytes: &[u8]) {
        for (i, b) in bytes.iter().enumerate() {
            let a = addr + i as u64;
            let page = self.pages.entry(a / PAGE).or_insert_with(|| Box::new([0; PAGE as usize]));
            page[(a % PAGE) as usize] = *b;
        }
    }

    /// Raw memory read that bypasses permissions.
    pub fn peek(&self, addr: u64, len: u64) -> Vec<u8> {
        (addr..addr + len)
            .map(|a| self.pages.get(&(a / PAGE)).map_or(0, |p| p[(a % PAGE) as usize]))
            .collect()
    }

    pub fn peek_u64(&self, addr: u64) -> u64 {
        u64::from_le_bytes(self.peek(addr, 8).try_into().expect("8 bytes"))
    }

    /// (marker, aex_count, last_checked) from the SSA page.
    pub fn ssa(&self) -> (u64, u64, u64) {
        let b = self.layout.ssa.base;
        (self.peek_u64(b + SSA_MARKER_OFFSET), self.peek_u64(b + SSA_COUNT_OFFSET), self.peek_u64(b + SSA_LAST_OFFSET))
    }

    /// Simulated asynchronous exit: bump the counter, clobber the marker.
    pub fn deliver_aex(&mut self, n: u32) {
        let (_, count, _) = self.ssa();
        let b = self.layout.ssa.base;
        self.poke(b + SSA_COUNT_OFFSET, &(count + n as u64).to_le_bytes());
        self.poke(b + SSA_MARKER_OFFSET, &0u64.to_le_bytes());
    }

    fn region(&self, addr: u64) -> Option<&MemRegion> {
        let idx = self.regions.partition_point(|r| r.region.base <= addr);
        idx.checked_sub(1).map(|i| &self.regions[i]).filter(|r| r.region.contains(addr))
    }

    fn trusted_role(&self, rip: u64) -> Option<TrustedRole> {
        self.trusted.iter().find(|t| rip >= t.start && rip < t.end).map(|t| t.role)
    }

    fn check(&self, addr: u64, len: u64, need: u8) -> Exec<()> {
        let last = addr.checked_add(len - 1).ok_or(Fault { kind: FaultKind::Unmapped, addr })?;
        for a in [addr, last] {
            let Some(r) = self.region(a) else {
                return Err(Fault { kind: FaultKind::Unmapped, addr: a });
            };
            if r.role == RegionRole::StackGuard {
                return Err(Fault { kind: FaultKind::GuardPage, addr: a });
            }
            if r.perms & need != need {
                return Err(Fault { kind: FaultKind::Perm, addr: a });
            }
            if need & PERM_W != 0 {
                let role = self.trusted_role(self.rip);
                let allowed = match r.role {
                    RegionRole::Shadow => role == Some(TrustedRole::ShadowStack),
                    RegionRole::Ssa => role == Some(TrustedRole::SsaPage),
                    _ => true,
                };
                if !allowed {
                    return Err(Fault { kind: FaultKind::Perm, addr: a });
                }
            }
        }
        Ok(())
    }

    fn read(&self, addr: u64) -> Exec<u64> {
        self.check(addr, 8, PERM_R)?;
        Ok(self.peek_u64(addr))
    }

    fn write_bytes(&mut self, addr: u64, bytes: &[u8]) -> Exec<()> {
        if bytes.is_empty() {
            return Ok(());
        }
        self.check(addr, bytes.len() as u64, PERM_W)?;
        self.poke(addr, bytes);
        self.write_log.push(WriteRecord {
            step: self.steps,
            addr,
            len: bytes.len() as u64,
            rip: self.rip,
            trusted: self.trusted_role(self.rip).is_some(),
        });
        Ok(())
    }

    fn write(&mut self, addr: u64, v: u64) -> Exec<()> {
        self.write_bytes(addr, &v.to_le_bytes())
    }

    fn push(&mut self, v: u64) -> Exec<()> {
        let rsp = self.get(Reg::Rsp).wrapping_sub(8);
        self.write(rsp, v)?;
        self.set(Reg::Rsp, rsp);
        Ok(())
    }

    fn pop(&mut self) -> Exec<u64> {
        let rsp = self.get(Reg::Rsp);
        let v = self.read(rsp)?;
        self.set(Reg::Rsp, rsp.wrapping_add(8));
        Ok(v)
    }

    fn ea(&self, m: &Mem) -> u64 {
        let mut a = self.get(m.base).wrapping_add(m.disp as i64 as u64);
        if let Some((r, s)) = m.index {
            a = a.wrapping_add(self.get(r).wrapping_mul(s as u64));
        }
        a
    }

    fn value(&self, op: &Operand) -> Exec<u64> {
        Ok(match op {
            Operand::Reg(r) => self.get(*r),
            Operand::Reg32(r) => self.get(*r) & 0xFFFF_FFFF,
            Operand::Imm(v) => *v as u64,
            Operand::Mem(m) => self.read(self.ea(m))?,
            Operand::Rel(t) => self.code_base.wrapping_add(*t as u64),
            Operand::Label(_) => unreachable!("decoded instructions carry no labels"),
        })
    }

    fn store(&mut self, op: &Operand, v: u64) -> Exec<()> {
        match op {
            Operand::Reg(r) => self.set(*r, v),
            Operand::Reg32(r) => self.set(*r, v & 0xFFFF_FFFF),
            Operand::Mem(m) => self.write(self.ea(m), v)?,
            _ => unreachable!("not a destination"),
        }
        Ok(())
    }

    fn condition(&self, m: Mnemonic) -> bool {
        let f = self.flags;
        match m {
            Mnemonic::Ja => !f.cf && !f.zf,
            Mnemonic::Jae => !f.cf,
            Mnemonic::Jb => f.cf,
            Mnemonic::Jbe => f.cf || f.zf,
            Mnemonic::Je => f.zf,
            Mnemonic::Jne => !f.zf,
            Mnemonic::Jg => !f.zf && f.sf == f.of,
            Mnemonic::Jl => f.sf != f.of,
            _ => unreachable!("not a conditional jump"),
        }
    }

    fn fetch(&mut self) -> Exec<Instruction> {
        self.check(self.rip, 1, PERM_X)?;
        let off = self.rip.wrapping_sub(self.code_base);
        if off >= self.code.len() as u64 {
            return Err(Fault { kind: FaultKind::Undecodable, addr: self.rip });
        }
        if let Some(i) = self.cache.get(&off) {
            return Ok(i.clone());
        }
        let i = decode_instruction(&self.code, off).map_err(|_| Fault { kind: FaultKind::Undecodable, addr: self.rip })?;
        self.cache.insert(off, i.clone());
        Ok(i)
    }

    /// Services the gateway page; returns a status if execution ends.
    fn trap(&mut self, host: &mut dyn Host) -> Exec<Option<Status>> {
        let l = &self.layout;
        let (send, recv, ret) = (l.send_stub(), l.recv_stub(), l.host_return());
        let rip = self.rip;
        if rip == ret {
            return Ok(Some(Status::Completed));
        }
        let gateway_fault = Fault { kind: FaultKind::Gateway, addr: rip };
        let (ptr, len) = (self.get(Reg::Rdi), self.get(Reg::Rsi));
        if len > MAX_HOST_MESSAGE {
            return Err(gateway_fault);
        }
        if rip == send {
            if len > 0 {
                self.check(ptr, len, PERM_R)?;
            }
            let msg = self.peek(ptr, len);
            host.send(&msg).map_err(|_| gateway_fault)?;
            self.outputs.push(msg);
            self.set(Reg::Rax, 0);
        } else if rip == recv {
            let msg = host.recv(len as usize).map_err(|_| gateway_fault)?;
            self.write_bytes(ptr, &msg)?;
            self.set(Reg::Rax, msg.len() as u64);
        } else {
            return Err(Fault { kind: FaultKind::Perm, addr: rip });
        }
        self.rip = self.pop()?;
        Ok(None)
    }

    /// Executes one instruction, or services one gateway call.
    pub fn step(&mut self, host: &mut dyn Host) -> Option<Status> {
        match self.step_inner(host) {
            Ok(s) => s,
            Err(f) => {
                self.fault_address = Some(f.addr);
                Some(Status::Fault(f.kind))
            }
        }
    }

    fn step_inner(&mut self, host: &mut dyn Host) -> Exec<Option<Status>> {
        if self.layout.gateway.contains(self.rip) {
            return self.trap(host);
        }
        if let Some(n) = self.aex_schedule.get(&self.steps).copied() {
            self.deliver_aex(n);
        }
        let i = self.fetch()?;
        let next = self.rip + i.length as u64;
        let mut target = next;
        use Mnemonic::*;
        let ops = &i.operands;
        match i.mnemonic {
            Mov | Movabs => {
                let v = self.value(&ops[1])?;
                self.store(&ops[0], v)?;
            }
            Lea => {
                let m = ops[1].as_mem().expect("lea has a memory source");
                let v = self.ea(m);
                self.store(&ops[0], v)?;
            }
            Add | Sub | And | Xor | Cmp => {
                let a = self.value(&ops[0])?;
                let b = self.value(&ops[1])?;
                let (r, flags) = match i.mnemonic {
                    Add => {
                        let (r, cf) = a.overflowing_add(b);
                        let of = (a as i64).overflowing_add(b as i64).1;
                        (r, Flags { zf: r == 0, sf: (r as i64) < 0, cf, of })
                    }
                    Sub | Cmp => {
                        let (r, cf) = a.overflowing_sub(b);
                        let of = (a as i64).overflowing_sub(b as i64).1;
                        (r, Flags { zf: r == 0, sf: (r as i64) < 0, cf, of })
                    }
                    And => (a & b, Flags::logic(a & b)),
                    _ => (a ^ b, Flags::logic(a ^ b)),
                };
                self.flags = flags;
                if i.mnemonic != Cmp {
                    self.store(&ops[0], r)?;
                }
            }
            Shr => {
                let a = self.value(&ops[0])?;
                let n = self.value(&ops[1])? & 63;
                if n != 0 {
                    let r = a >> n;
                    self.flags = Flags {
                        zf: r == 0,
                        sf: (r as i64) < 0,
                        cf: (a >> (n - 1)) & 1 != 0,
                        of: n == 1 && (a as i64) < 0,
                    };
                    self.store(&ops[0], r)?;
                }
            }
            Push => {
                let v = self.value(&ops[0])?;
                self.push(v)?;
            }
            Pop => {
                let v = self.pop()?;
                self.store(&ops[0], v)?;
            }
            Pushf => self.push(self.flags.to_bits())?,
            Popf => self.flags = Flags::from_bits(self.pop()?),
            Call => {
                target = self.value(&ops[0])?;
                self.push(next)?;
            }
            Jmp => target = self.value(&ops[0])?,
            Ret => target = self.pop()?,
            Nop => {}
            Hlt => {
                self.steps += 1;
                return Ok(Some(Status::Violation(self.get(Reg::Rdi) as u32)));
            }
            m if m.is_conditional_jump() => {
                if self.condition(m) {
                    target = self.value(&ops[0])?;
                }
            }
            _ => unreachable!("decoder produced an unknown mnemonic"),
        }
        self.steps += 1;
        self.rip = target;
        Ok(None)
    }

    /// SHA-256 over the non-zero pages of the data region.
    pub fn data_snapshot(&self) -> [u8; 32] {
        let data = self.layout.data;
        let mut keys: Vec<u64> = self
            .pages
            .keys()
            .copied()
            .filter(|p| data.contains(p * PAGE))
            .collect();
        keys.sort_unstable();
        let mut h = Sha256::new();
        for k in keys {
            let page = &self.pages[&k];
            if page.iter().any(|b| *b != 0) {
                h.update(k.to_le_bytes());
                h.update(&page[..]);
            }
        }
        h.finalize().into()
    }

    fn outcome(self, status: Status) -> ExecutionOutcome {
        ExecutionOutcome {
            status,
            steps: self.steps,
            data_snapshot: self.data_snapshot(),
            outputs: self.outputs,
            write_log: self.write_log,
            fault_address: self.fault_address,
        }
    }

    pub fn run_to_end(mut self, host: &mut dyn Host, step_limit: u64) -> ExecutionOutcome {
        loop {
            if self.steps >= step_limit {
                return self.outcome(Status::StepLimit);
            }
            if let Some(status) = self.step(host) {
                return self.outcome(status);
            }
        }
    }
}

/// Runs a loaded (normally verified and rewritten) image from its entry.
pub fn run(img: &LoadedImage, inputs: &[u8], host: &mut dyn Host, config: &RunConfig) -> Result<ExecutionOutcome, EmuError> {
    let st = EmuState::new(img, inputs, config.aex_schedule.clone())?;
    Ok(st.run_to_end(host, config.step_limit))
}

/// Baseline run of a program linked without any policy support.
pub fn run_uninstrumented(
    program: &Program,
    layout: &EnclaveLayout,
    inputs: &[u8],
    host: &mut dyn Host,
    step_limit: u64,
) -> Result<ExecutionOutcome, EmuError> {
    if program.functions.is_empty() {
        if inputs.len() as u64 > layout.data.size {
            return Err(EmuError::DataTooLarge { size: inputs.len(), capacity: layout.data.size });
        }
        let mut h = Sha256::new();
        if inputs.iter().any(|b| *b != 0) {
            for (i, chunk) in inputs.chunks(PAGE as usize).enumerate() {
                if chunk.iter().any(|b| *b != 0) {
                    let mut page = [0u8; PAGE as usize];
                    page[..chunk.len()].copy_from_slice(chunk);
                    h.update((layout.data.base / PAGE + i as u64).to_le_bytes());
                    h.update(page);
                }
            }
        }
        return Ok(ExecutionOutcome {
            status: Status::Completed,
            steps: 0,
            outputs: Vec::new(),
            data_snapshot: h.finalize().into(),
            write_log: Vec::new(),
            fault_address: None,
        });
    }
    let bundle = link(program, &PolicyManifest::default())?;
    let img = load(&bundle, layout)?;
    run(&img, inputs, host, &RunConfig { step_limit, ..RunConfig::default() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instrument::build_baseline;

    fn image(src: &str) -> LoadedImage {
        load(&build_baseline(src).unwrap(), &EnclaveLayout::default()).unwrap()
    }

    fn go(src: &str, inputs: &[u8]) -> ExecutionOutcome {
        run(&image(src), inputs, &mut RecordingHost::default(), &RunConfig::default()).unwrap()
    }

    #[test]
    fn store_to_data_region() {
        let out = go("main:\n mov rax, 42\n mov [rdi], rax\n ret\n", &[]);
        assert_eq!(out.status, Status::Completed);
        assert_eq!(out.steps, 3);
        let data = EnclaveLayout::default().data.base;
        assert_eq!(out.write_log.iter().filter(|w| w.addr == data).count(), 1);
    }

    #[test]
    fn push_into_guard_page_faults() {
        let l = EnclaveLayout::default();
        let src = format!("main:\n movabs rsp, {}\n push rax\n ret\n", l.stack.base);
        let out = go(&src, &[]);
        assert_eq!(out.status, Status::Fault(FaultKind::GuardPage));
        assert_eq!(out.fault_address, Some(l.stack.base - 8));
        assert!(out.write_log.is_empty());
    }

    #[test]
    fn aex_bumps_counter_and_clobbers_marker() {
        let img = image("main:\n nop\n nop\n ret\n");
        let mut st = EmuState::new(&img, &[], BTreeMap::from([(1, 2)])).unwrap();
        let mut host = RecordingHost::default();
        assert_eq!(st.ssa(), (SSA_MARKER as u64, 0, 0));
        st.step(&mut host);
        st.step(&mut host);
        let (marker, count, _) = st.ssa();
        assert_eq!(count, 2);
        assert_ne!(marker, SSA_MARKER as u64);
    }

    #[test]
    fn untrusted_shadow_write_faults() {
        let l = EnclaveLayout::default();
        let src = format!("main:\n movabs rbx, {}\n mov [rbx], rax\n ret\n", l.shadow.base);
        assert_eq!(go(&src, &[]).status, Status::Fault(FaultKind::Perm));
    }

    #[test]
    fn code_is_not_writable() {
        let out = go("main:\n movabs rbx, main\n mov [rbx], rax\n ret\n", &[]);
        assert_eq!(out.status, Status::Fault(FaultKind::Perm));
    }

    #[test]
    fn flags_and_conditional_jumps() {
        // computes 5 + 4 + ... + 1 by a counted loop
        let src = "main:\n mov rcx, 5\n xor rax, rax\nloop:\n add rax, rcx\n sub rcx, 1\n cmp rcx, 0\n jg loop\n mov [rdi], rax\n ret\n";
        let img = image(src);
        let st = EmuState::new(&img, &[], BTreeMap::new()).unwrap();
        let out = st.run_to_end(&mut RecordingHost::default(), 1000);
        assert_eq!(out.status, Status::Completed);
        let mut st = EmuState::new(&img, &[], BTreeMap::new()).unwrap();
        let mut host = RecordingHost::default();
        while st.step(&mut host).is_none() {}
        assert_eq!(st.peek_u64(img.layout.data.base), 15);
    }

    #[test]
    fn hlt_reports_edi() {
        assert_eq!(go("main:\n mov edi, 7\n hlt\n", &[]).status, Status::Violation(7));
    }

    #[test]
    fn send_through_gateway() {
        let src = "main:\n mov rsi, 3\n call ocall_send\n ret\n";
        let out = go(src, b"abcdef");
        assert_eq!(out.status, Status::Completed);
        assert_eq!(out.outputs, vec![b"abc".to_vec()]);
    }

    #[test]
    fn empty_program_completes_in_zero_steps() {
        let p = Program::parse("").unwrap();
        let out = run_uninstrumented(&p, &EnclaveLayout::default(), &[], &mut RecordingHost::default(), 10).unwrap();
        assert_eq!((out.status, out.steps), (Status::Completed, 0));
    }

    #[test]
    fn schedule_parsing_counts_repeats() {
        let s = parse_aex_schedule("5\n5\n\n7\n").unwrap();
        assert_eq!(s, BTreeMap::from([(5, 2), (7, 1)]));
        assert!(parse_aex_schedule("x").is_err());
    }

    #[test]
    fn deterministic_runs() {
        let src = "main:\n mov rcx, 100\nl:\n sub rcx, 1\n mov [rdi+8], rcx\n cmp rcx, 0\n jne l\n ret\n";
        assert_eq!(go(src, b"x"), go(src, b"x"));
    }
}
