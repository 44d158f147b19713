//! Rule-based encoding of decomposed x86-64 instructions into fixed 439-wide
//! indicator vectors, and per-basic-block aggregation.
//!
//! Vector layout (offsets are half-open ranges):
//!
//! | field            | range      | style                          |
//! |------------------|------------|--------------------------------|
//! | prefix group     | 0..8       | one-hot                        |
//! | opcode byte      | 8..264     | one-hot                        |
//! | ModRM.mod        | 264..268   | one-hot                        |
//! | ModRM.reg        | 268..276   | one-hot                        |
//! | ModRM.rm         | 276..284   | one-hot                        |
//! | SIB.scale        | 284..288   | one-hot                        |
//! | SIB.index        | 288..296   | one-hot                        |
//! | SIB.base         | 296..304   | one-hot                        |
//! | displacement     | 304..368   | 64 bits, most significant first|
//! | immediate        | 368..432   | 64 bits, most significant first|
//! | presence flags   | 432..439   | prefix, opcode, modrm, sib, displacement, immediate, reserved |

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const INSTR_DIM: usize = 439;

pub const PREFIX_OFFSET: usize = 0;
pub const OPCODE_OFFSET: usize = 8;
pub const MODRM_OFFSET: usize = 264;
pub const SIB_OFFSET: usize = 284;
pub const DISP_OFFSET: usize = 304;
pub const IMM_OFFSET: usize = 368;
pub const FLAG_OFFSET: usize = 432;

/// Index of each presence flag relative to [`FLAG_OFFSET`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Prefix = 0,
    Opcode = 1,
    ModRm = 2,
    Sib = 3,
    Displacement = 4,
    Immediate = 5,
    Reserved = 6,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModRm {
    #[serde(rename = "mod")]
    pub mode: u8,
    pub reg: u8,
    pub rm: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sib {
    pub scale: u8,
    pub index: u8,
    pub base: u8,
}

/// One instruction, already split into its encoding fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Value")]
pub struct InstructionRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prefix_group: Option<u8>,
    pub opcode: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modrm: Option<ModRm>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sib: Option<Sib>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub displacement: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub immediate: Option<u64>,
}

impl TryFrom<Value> for InstructionRecord {
    type Error = Error;

    fn try_from(value: Value) -> Result<Self> {
        parse_instruction_record(&value)
    }
}

impl InstructionRecord {
    pub fn opcode(opcode: u8) -> Self {
        InstructionRecord {
            prefix_group: None,
            opcode,
            modrm: None,
            sib: None,
            displacement: None,
            immediate: None,
        }
    }

    pub fn with_prefix(mut self, group: u8) -> Self {
        self.prefix_group = Some(group);
        self
    }

    pub fn with_modrm(mut self, mode: u8, reg: u8, rm: u8) -> Self {
        self.modrm = Some(ModRm { mode, reg, rm });
        self
    }

    pub fn with_sib(mut self, scale: u8, index: u8, base: u8) -> Self {
        self.sib = Some(Sib { scale, index, base });
        self
    }

    pub fn with_displacement(mut self, disp: u64) -> Self {
        self.displacement = Some(disp);
        self
    }

    pub fn with_immediate(mut self, imm: u64) -> Self {
        self.immediate = Some(imm);
        self
    }

    /// Checks every sub-index against its range.
    pub fn validate(&self) -> Result<()> {
        check_range("prefix_group", self.prefix_group.map(u64::from), 8)?;
        if let Some(m) = self.modrm {
            check_range("modrm.mod", Some(m.mode.into()), 4)?;
            check_range("modrm.reg", Some(m.reg.into()), 8)?;
            check_range("modrm.rm", Some(m.rm.into()), 8)?;
        }
        if let Some(s) = self.sib {
            check_range("sib.scale", Some(s.scale.into()), 4)?;
            check_range("sib.index", Some(s.index.into()), 8)?;
            check_range("sib.base", Some(s.base.into()), 8)?;
        }
        Ok(())
    }
}

fn check_range(field: &'static str, value: Option<u64>, bound: u64) -> Result<()> {
    match value {
        Some(v) if v >= bound => Err(Error::Instruction {
            field,
            message: format!("{field} out of range ({v} not in [0,{bound}))"),
        }),
        _ => Ok(()),
    }
}

fn field_u64(map: &Map<String, Value>, key: &str, field: &'static str) -> Result<Option<u64>> {
    match map.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v.as_u64().map(Some).ok_or_else(|| Error::Instruction {
            field,
            message: format!("{field} must be a non-negative integer, got {v}"),
        }),
    }
}

fn bounded(
    map: &Map<String, Value>,
    key: &str,
    field: &'static str,
    bound: u64,
) -> Result<Option<u8>> {
    let v = field_u64(map, key, field)?;
    check_range(field, v, bound)?;
    Ok(v.map(|v| v as u8))
}

fn sub_object<'a>(
    map: &'a Map<String, Value>,
    key: &str,
    field: &'static str,
) -> Result<Option<&'a Map<String, Value>>> {
    match map.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Object(m)) => Ok(Some(m)),
        Some(v) => Err(Error::Instruction {
            field,
            message: format!("{field} must be an object, got {v}"),
        }),
    }
}

fn required(field: &'static str, v: Option<u8>) -> Result<u8> {
    v.ok_or_else(|| Error::Instruction {
        field,
        message: format!("missing {field}"),
    })
}

/// Validates a field map such as `{"opcode":137,"modrm":{"mod":3,"reg":0,"rm":1}}`.
pub fn parse_instruction_record(value: &Value) -> Result<InstructionRecord> {
    let map = value.as_object().ok_or_else(|| Error::Instruction {
        field: "record",
        message: "instruction record must be an object".into(),
    })?;
    const KNOWN: [&str; 6] = [
        "prefix_group",
        "opcode",
        "modrm",
        "sib",
        "displacement",
        "immediate",
    ];
    if let Some(unknown) = map.keys().find(|k| !KNOWN.contains(&k.as_str())) {
        return Err(Error::Instruction {
            field: "record",
            message: format!("unknown field `{unknown}`"),
        });
    }
    let opcode = required("opcode", bounded(map, "opcode", "opcode", 256)?)?;
    let prefix_group = bounded(map, "prefix_group", "prefix_group", 8)?;
    let modrm = match sub_object(map, "modrm", "modrm")? {
        Some(m) => Some(ModRm {
            mode: required("modrm.mod", bounded(m, "mod", "modrm.mod", 4)?)?,
            reg: required("modrm.reg", bounded(m, "reg", "modrm.reg", 8)?)?,
            rm: required("modrm.rm", bounded(m, "rm", "modrm.rm", 8)?)?,
        }),
        None => None,
    };
    let sib = match sub_object(map, "sib", "sib")? {
        Some(m) => Some(Sib {
            scale: required("sib.scale", bounded(m, "scale", "sib.scale", 4)?)?,
            index: required("sib.index", bounded(m, "index", "sib.index", 8)?)?,
            base: required("sib.base", bounded(m, "base", "sib.base", 8)?)?,
        }),
        None => None,
    };
    Ok(InstructionRecord {
        prefix_group,
        opcode,
        modrm,
        sib,
        displacement: field_u64(map, "displacement", "displacement")?,
        immediate: field_u64(map, "immediate", "immediate")?,
    })
}

/// Encoded single instruction: 439 entries in {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct InstrVector(pub Vec<f64>);

/// Aggregate over the instructions of one basic block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockVector(pub Vec<f64>);

impl BlockVector {
    pub fn zeros() -> Self {
        BlockVector(vec![0.0; INSTR_DIM])
    }
}

fn write_bits(out: &mut [f64], value: u64) {
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = f64::from(((value >> (63 - i)) & 1) as u8);
    }
}

pub fn encode_instruction(instr: &InstructionRecord) -> InstrVector {
    let mut v = vec![0.0; INSTR_DIM];
    let flag = |v: &mut Vec<f64>, c: Component| v[FLAG_OFFSET + c as usize] = 1.0;

    if let Some(p) = instr.prefix_group {
        v[PREFIX_OFFSET + p as usize] = 1.0;
        flag(&mut v, Component::Prefix);
    }
    v[OPCODE_OFFSET + instr.opcode as usize] = 1.0;
    flag(&mut v, Component::Opcode);
    if let Some(m) = instr.modrm {
        v[MODRM_OFFSET + m.mode as usize] = 1.0;
        v[MODRM_OFFSET + 4 + m.reg as usize] = 1.0;
        v[MODRM_OFFSET + 12 + m.rm as usize] = 1.0;
        flag(&mut v, Component::ModRm);
    }
    if let Some(s) = instr.sib {
        v[SIB_OFFSET + s.scale as usize] = 1.0;
        v[SIB_OFFSET + 4 + s.index as usize] = 1.0;
        v[SIB_OFFSET + 12 + s.base as usize] = 1.0;
        flag(&mut v, Component::Sib);
    }
    if let Some(d) = instr.displacement {
        write_bits(&mut v[DISP_OFFSET..DISP_OFFSET + 64], d);
        flag(&mut v, Component::Displacement);
    }
    if let Some(i) = instr.immediate {
        write_bits(&mut v[IMM_OFFSET..IMM_OFFSET + 64], i);
        flag(&mut v, Component::Immediate);
    }
    InstrVector(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggMode {
    #[default]
    Mean,
    Max,
}

pub fn aggregate_block(vectors: &[InstrVector], mode: AggMode) -> Result<BlockVector> {
    let first = vectors.first().ok_or(Error::EmptyBlock)?;
    let mut acc = first.0.clone();
    for v in &vectors[1..] {
        for (a, x) in acc.iter_mut().zip(&v.0) {
            match mode {
                AggMode::Mean => *a += x,
                AggMode::Max => *a = a.max(*x),
            }
        }
    }
    if mode == AggMode::Mean {
        let n = vectors.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
    }
    Ok(BlockVector(acc))
}

/// Encodes and aggregates one basic block.
pub fn encode_block(block: &[InstructionRecord], mode: AggMode) -> Result<BlockVector> {
    let vectors: Vec<InstrVector> = block.iter().map(encode_instruction).collect();
    aggregate_block(&vectors, mode)
}
