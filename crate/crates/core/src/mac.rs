//! Uplink MAC PDU layout: R/F/LCID subheaders, SDU subPDUs, trailing control elements.

use crate::bits::{push_uint, read_uint, Bits};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

pub const LCID_SDU_MIN: u8 = 1;
pub const LCID_SDU_MAX: u8 = 32;
pub const LCID_PHR: u8 = 57;
pub const LCID_SHORT_BSR: u8 = 61;
pub const LCID_LONG_BSR: u8 = 62;
pub const LCID_PADDING: u8 = 63;

/// Bits of the R/F/LCID octet.
pub const BASE_HEADER_BITS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CeKind {
    ShortBsr,
    LongBsr,
    Phr,
}

impl CeKind {
    pub fn lcid(self) -> u8 {
        match self {
            CeKind::ShortBsr => LCID_SHORT_BSR,
            CeKind::LongBsr => LCID_LONG_BSR,
            CeKind::Phr => LCID_PHR,
        }
    }

    pub fn from_lcid(lcid: u8) -> Option<Self> {
        match lcid {
            LCID_SHORT_BSR => Some(CeKind::ShortBsr),
            LCID_LONG_BSR => Some(CeKind::LongBsr),
            LCID_PHR => Some(CeKind::Phr),
            _ => None,
        }
    }

    /// Payload size in bits for fixed-size elements.
    pub fn fixed_bits(self) -> Option<usize> {
        match self {
            CeKind::ShortBsr | CeKind::Phr => Some(8),
            CeKind::LongBsr => None,
        }
    }
}

/// What an LCID value denotes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LcidKind {
    Sdu,
    Ce(CeKind),
    Padding,
    Reserved,
}

pub fn lcid_kind(lcid: u8) -> LcidKind {
    if (LCID_SDU_MIN..=LCID_SDU_MAX).contains(&lcid) {
        LcidKind::Sdu
    } else if lcid == LCID_PADDING {
        LcidKind::Padding
    } else if let Some(k) = CeKind::from_lcid(lcid) {
        LcidKind::Ce(k)
    } else {
        LcidKind::Reserved
    }
}

/// Whether a subheader with this LCID carries an L field.
pub fn has_length_field(lcid: u8) -> bool {
    match lcid_kind(lcid) {
        LcidKind::Sdu => true,
        LcidKind::Ce(k) => k.fixed_bits().is_none(),
        LcidKind::Padding | LcidKind::Reserved => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCe {
    pub kind: CeKind,
    pub payload: Bits,
}

impl MacCe {
    pub fn new(kind: CeKind, payload: Bits) -> Result<Self> {
        let ok = match kind.fixed_bits() {
            Some(n) => payload.len() == n,
            None => !payload.is_empty() && payload.len() % 8 == 0 && payload.len() / 8 <= u16::MAX as usize,
        };
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "{kind:?} payload of {} bits has the wrong size",
                payload.len()
            )));
        }
        Ok(Self { kind, payload })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subheader {
    pub lcid: u8,
    pub f_flag: bool,
    /// Payload bytes; `None` for fixed-size elements and padding.
    pub length: Option<u16>,
    pub bit_offset: usize,
}

impl Subheader {
    pub fn header_bits(&self) -> usize {
        match self.length {
            None => BASE_HEADER_BITS,
            Some(_) if self.f_flag => BASE_HEADER_BITS + 16,
            Some(_) => BASE_HEADER_BITS + 8,
        }
    }

    /// Payload size in bits, `None` for padding (which runs to the PDU end).
    pub fn payload_bits(&self) -> Option<usize> {
        match (self.length, lcid_kind(self.lcid)) {
            (Some(l), _) => Some(8 * l as usize),
            (None, LcidKind::Ce(k)) => k.fixed_bits(),
            _ => None,
        }
    }

    pub fn is_ce(&self) -> bool {
        matches!(lcid_kind(self.lcid), LcidKind::Ce(_))
    }

    fn write(&self, out: &mut Bits) {
        push_uint(out, 0, 1);
        push_uint(out, u64::from(self.f_flag), 1);
        push_uint(out, u64::from(self.lcid), 6);
        if let Some(l) = self.length {
            push_uint(out, u64::from(l), if self.f_flag { 16 } else { 8 });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubPdu {
    pub header: Subheader,
    pub payload: Bits,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacPdu {
    pub subpdus: Vec<SubPdu>,
    /// Bits occupied by the padding subPDU, header included.
    pub padding_bits: usize,
    pub total_bits: usize,
}

impl MacPdu {
    pub fn sdus(&self) -> impl Iterator<Item = &SubPdu> {
        self.subpdus.iter().filter(|s| !s.header.is_ce())
    }

    pub fn ces(&self) -> Vec<MacCe> {
        self.subpdus
            .iter()
            .filter_map(|s| match lcid_kind(s.header.lcid) {
                LcidKind::Ce(kind) => Some(MacCe { kind, payload: s.payload.clone() }),
                _ => None,
            })
            .collect()
    }

    /// Sum of subheader bits, padding header included.
    pub fn header_bits(&self) -> usize {
        let pad = if self.padding_bits > 0 { BASE_HEADER_BITS } else { 0 };
        self.subpdus.iter().map(|s| s.header.header_bits()).sum::<usize>() + pad
    }

    pub fn to_bits(&self) -> Bits {
        let mut out = Vec::with_capacity(self.total_bits);
        for s in &self.subpdus {
            s.header.write(&mut out);
            out.extend_from_slice(&s.payload);
        }
        if self.padding_bits > 0 {
            push_uint(&mut out, u64::from(LCID_PADDING), BASE_HEADER_BITS);
            out.resize(self.total_bits, 0);
        }
        debug_assert_eq!(out.len(), self.total_bits);
        out
    }
}

/// Header bits an SDU of `bytes` bytes needs.
pub fn sdu_header_bits(bytes: usize) -> usize {
    if bytes <= 255 {
        BASE_HEADER_BITS + 8
    } else {
        BASE_HEADER_BITS + 16
    }
}

/// Assembles a PDU of exactly `target_bits`, SDUs first, CEs last, padding after.
pub fn build_pdu(sdus: &[(u8, Bits)], ces: &[MacCe], target_bits: usize) -> Result<MacPdu> {
    let mut subpdus = Vec::with_capacity(sdus.len() + ces.len());
    let mut pos = 0;
    for (lcid, payload) in sdus {
        if lcid_kind(*lcid) != LcidKind::Sdu {
            return Err(Error::InvalidArgument(format!("lcid {lcid} is not a logical channel")));
        }
        if payload.len() % 8 != 0 || payload.len() / 8 > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "SDU payload of {} bits is not a whole byte count within 16 bits",
                payload.len()
            )));
        }
        let bytes = payload.len() / 8;
        let header = Subheader { lcid: *lcid, f_flag: bytes > 255, length: Some(bytes as u16), bit_offset: pos };
        pos += header.header_bits() + payload.len();
        subpdus.push(SubPdu { header, payload: payload.clone() });
    }
    for ce in ces {
        let ce = MacCe::new(ce.kind, ce.payload.clone())?;
        let length = ce.kind.fixed_bits().is_none().then_some((ce.payload.len() / 8) as u16);
        let f_flag = length.is_some_and(|l| l > 255);
        let header = Subheader { lcid: ce.kind.lcid(), f_flag, length, bit_offset: pos };
        pos += header.header_bits() + ce.payload.len();
        subpdus.push(SubPdu { header, payload: ce.payload });
    }
    let rest = target_bits.checked_sub(pos).ok_or(Error::Capacity { needed: pos, available: target_bits })?;
    if rest > 0 && rest < BASE_HEADER_BITS {
        return Err(Error::Capacity { needed: pos + BASE_HEADER_BITS, available: target_bits });
    }
    Ok(MacPdu { subpdus, padding_bits: rest, total_bits: target_bits })
}

/// Decodes the subheader at `pos`. For padding `next_pos` is the PDU end.
pub fn parse_subheader(bits: &[u8], pos: usize) -> Result<(Subheader, usize)> {
    decode_subheader(&bits[pos.min(bits.len())..], pos, bits.len())
}

/// Like [`parse_subheader`] but reads from `window`, the PDU bits starting at
/// `pos`, which need only cover the subheader itself.
pub fn decode_subheader(window: &[u8], pos: usize, pdu_len: usize) -> Result<(Subheader, usize)> {
    let malformed = |reason: &str| Error::MalformedPdu { pos, reason: reason.to_string() };
    if pos + BASE_HEADER_BITS > pdu_len || window.len() < BASE_HEADER_BITS {
        return Err(malformed("truncated subheader"));
    }
    let reserved = read_uint(window, 0, 1);
    let f_flag = read_uint(window, 1, 1) == 1;
    let lcid = read_uint(window, 2, 6) as u8;
    if reserved != 0 {
        return Err(malformed("reserved bit set"));
    }
    let mut next = pos + BASE_HEADER_BITS;
    let header = match lcid_kind(lcid) {
        LcidKind::Reserved => return Err(malformed("reserved LCID")),
        LcidKind::Padding => {
            return Ok((Subheader { lcid, f_flag: false, length: None, bit_offset: pos }, pdu_len));
        }
        LcidKind::Ce(k) if k.fixed_bits().is_some() => {
            if f_flag {
                return Err(malformed("F set on fixed-size element"));
            }
            next += k.fixed_bits().unwrap_or(0);
            Subheader { lcid, f_flag, length: None, bit_offset: pos }
        }
        _ => {
            let width = if f_flag { 16 } else { 8 };
            if next + width > pdu_len || window.len() < BASE_HEADER_BITS + width {
                return Err(malformed("truncated length field"));
            }
            let length = read_uint(window, BASE_HEADER_BITS, width) as u16;
            next += width + 8 * length as usize;
            Subheader { lcid, f_flag, length: Some(length), bit_offset: pos }
        }
    };
    if next > pdu_len {
        return Err(malformed("subPDU runs past the PDU end"));
    }
    Ok((header, next))
}

/// Parses a CRC-passed PDU, enforcing the trailing-CE rule.
pub fn parse_pdu(bits: &[u8]) -> Result<MacPdu> {
    let mut subpdus: Vec<SubPdu> = Vec::new();
    let mut pos = 0;
    let mut padding_bits = 0;
    let mut seen_ce = false;
    while pos < bits.len() {
        let (header, next) = parse_subheader(bits, pos)?;
        if header.lcid == LCID_PADDING {
            padding_bits = bits.len() - pos;
            break;
        }
        if header.is_ce() {
            seen_ce = true;
        } else if seen_ce {
            return Err(Error::MalformedPdu { pos, reason: "SDU after a control element".into() });
        }
        let start = pos + header.header_bits();
        subpdus.push(SubPdu { header, payload: bits[start..next].to_vec() });
        pos = next;
    }
    Ok(MacPdu { subpdus, padding_bits, total_bits: bits.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bits::random_bits;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pdu(rng: &mut ChaCha8Rng) -> (Vec<(u8, Bits)>, Vec<MacCe>, usize) {
        let sdus: Vec<(u8, Bits)> = (0..rng.gen_range(0..6))
            .map(|_| {
                let bytes = if rng.gen_bool(0.2) { rng.gen_range(256..600) } else { rng.gen_range(0..256) };
                (rng.gen_range(LCID_SDU_MIN..=LCID_SDU_MAX), random_bits(rng, 8 * bytes))
            })
            .collect();
        let mut ces = Vec::new();
        if rng.gen_bool(0.5) {
            ces.push(MacCe::new(CeKind::ShortBsr, random_bits(rng, 8)).unwrap());
        }
        if rng.gen_bool(0.3) {
            let n = rng.gen_range(1..5);
            ces.push(MacCe::new(CeKind::LongBsr, random_bits(rng, 8 * n)).unwrap());
        }
        if rng.gen_bool(0.3) {
            ces.push(MacCe::new(CeKind::Phr, random_bits(rng, 8)).unwrap());
        }
        let used: usize = sdus.iter().map(|(_, p)| sdu_header_bits(p.len() / 8) + p.len()).sum::<usize>()
            + ces.iter().map(|c| c.payload.len() + if c.kind == CeKind::LongBsr { 16 } else { 8 }).sum::<usize>();
        let extra = match rng.gen_range(0..3) {
            0 => 0,
            _ => 8 * rng.gen_range(1..40),
        };
        (sdus, ces, used + extra)
    }

    #[test]
    fn single_sdu_layout() {
        let pdu = build_pdu(&[(5, vec![1; 800])], &[], 824).unwrap();
        assert_eq!(pdu.subpdus[0].header.header_bits(), 16);
        assert_eq!(pdu.padding_bits, 8);
        let bits = pdu.to_bits();
        assert_eq!(bits.len(), 824);
        assert_eq!(read_uint(&bits, 816, 8), u64::from(LCID_PADDING));
    }

    #[test]
    fn ce_follows_last_sdu_payload() {
        let bsr = MacCe::new(CeKind::ShortBsr, vec![0, 1, 0, 1, 0, 1, 0, 1]).unwrap();
        let pdu = build_pdu(&[(4, vec![0; 80])], &[bsr], 200).unwrap();
        assert_eq!(pdu.subpdus[1].header.bit_offset, 16 + 80);
        assert_eq!(pdu.subpdus[1].header.lcid, LCID_SHORT_BSR);
    }

    #[test]
    fn capacity_errors() {
        assert!(matches!(build_pdu(&[(5, vec![0; 800])], &[], 800), Err(Error::Capacity { .. })));
        assert!(matches!(build_pdu(&[(5, vec![0; 800])], &[], 820), Err(Error::Capacity { .. })));
        assert!(matches!(build_pdu(&[(40, vec![0; 8])], &[], 100), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn subheader_examples() {
        let mut bits = Vec::new();
        push_uint(&mut bits, 0b0000_0101, 8);
        push_uint(&mut bits, 0x64, 8);
        bits.resize(816, 0);
        let (h, next) = parse_subheader(&bits, 0).unwrap();
        assert_eq!((h.lcid, h.length, next), (5, Some(100), 816));

        let mut bits = vec![0; 24];
        push_uint(&mut bits, u64::from(LCID_SHORT_BSR), 8);
        push_uint(&mut bits, 0xA5, 8);
        let (h, next) = parse_subheader(&bits, 24).unwrap();
        assert_eq!((h.length, next), (None, 24 + 16));

        let mut bits = Vec::new();
        push_uint(&mut bits, 5, 8);
        push_uint(&mut bits, 200, 8);
        bits.resize(100, 0);
        assert!(matches!(parse_subheader(&bits, 0), Err(Error::MalformedPdu { .. })));
    }

    #[test]
    fn padding_only_pdu() {
        let pdu = build_pdu(&[], &[], 64).unwrap();
        let parsed = parse_pdu(&pdu.to_bits()).unwrap();
        assert!(parsed.subpdus.is_empty());
        assert_eq!(parsed.padding_bits, 64);
    }

    #[test]
    fn sdu_after_ce_is_rejected() {
        let mut bits = Vec::new();
        push_uint(&mut bits, u64::from(LCID_PHR), 8);
        push_uint(&mut bits, 0, 8);
        push_uint(&mut bits, 4, 8);
        push_uint(&mut bits, 1, 8);
        push_uint(&mut bits, 0xff, 8);
        assert!(matches!(parse_pdu(&bits), Err(Error::MalformedPdu { pos: 16, .. })));
    }

    #[test]
    fn round_trip_10k() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10_000 {
            let (sdus, ces, target) = random_pdu(&mut rng);
            let pdu = build_pdu(&sdus, &ces, target).unwrap();
            let bits = pdu.to_bits();
            let parsed = parse_pdu(&bits).unwrap();
            assert_eq!(parsed, pdu);
            assert_eq!(parsed.ces(), ces);
            let got: Vec<(u8, Bits)> = parsed.sdus().map(|s| (s.header.lcid, s.payload.clone())).collect();
            assert_eq!(got, sdus);
        }
    }

    #[test]
    fn fuzz_never_panics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ok = 0;
        for _ in 0..100_000 {
            let len = rng.gen_range(0..400);
            let bits = random_bits(&mut rng, len);
            match parse_pdu(&bits) {
                Ok(p) => {
                    ok += 1;
                    assert_eq!(p.to_bits().len(), len);
                }
                Err(e) => assert!(matches!(e, Error::MalformedPdu { .. })),
            }
        }
        assert!(ok > 0);
    }
}
