// SPDX-License-Identifier: Apache-2.0

//! Byte layout of a compressed cloud. All integers are little-endian.
//!
//! ```text
//! header   magic "IPCC" | version u8 | flags u8 | precision u8 | blk_size u16
//!          | sf f32 | qs f32 | model id u8 | block count u32
//! record   grid x,y,z u16 | k_codec u32 | k_abu u32 | octant mask u8
//!          | side len u32 | side bytes | main len u32 | main bytes
//! ```

use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"IPCC";
pub const VERSION: u8 = 1;
pub const FLAG_COLOR: u8 = 1;
pub const FLAG_ABU: u8 = 2;
pub const HEADER_LEN: usize = 4 + 1 + 1 + 1 + 2 + 4 + 4 + 1 + 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BitstreamHeader {
    pub with_color: bool,
    pub abu: bool,
    pub precision: u8,
    pub blk_size: u16,
    pub sf: f32,
    pub qs: f32,
    pub model_id: u8,
    pub block_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockRecord {
    /// Block origin divided by the block size, in the down-sampled frame.
    pub grid: [u16; 3],
    pub k_codec: u32,
    /// Points kept after learned up-sampling; 0 leaves the block at basic
    /// up-sampling.
    pub k_abu: u32,
    pub mask: u8,
    pub side: Vec<u8>,
    pub main: Vec<u8>,
}

impl BlockRecord {
    pub fn payload_len(&self) -> usize {
        self.side.len() + self.main.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bitstream {
    pub header: BitstreamHeader,
    pub records: Vec<BlockRecord>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        if h.block_count as usize != self.records.len() {
            return Err(Error::arg("header block count disagrees with the records"));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + self.records.iter().map(|r| 27 + r.payload_len()).sum::<usize>());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(if h.with_color { FLAG_COLOR } else { 0 } | if h.abu { FLAG_ABU } else { 0 });
        out.push(h.precision);
        out.extend_from_slice(&h.blk_size.to_le_bytes());
        out.extend_from_slice(&h.sf.to_le_bytes());
        out.extend_from_slice(&h.qs.to_le_bytes());
        out.push(h.model_id);
        out.extend_from_slice(&h.block_count.to_le_bytes());
        for r in &self.records {
            if r.k_codec == 0 {
                return Err(Error::arg("record with k_codec = 0"));
            }
            for g in r.grid {
                out.extend_from_slice(&g.to_le_bytes());
            }
            out.extend_from_slice(&r.k_codec.to_le_bytes());
            out.extend_from_slice(&r.k_abu.to_le_bytes());
            out.push(r.mask);
            for payload in [&r.side, &r.main] {
                let len = u32::try_from(payload.len()).map_err(|_| Error::arg("payload over 4 GiB"))?;
                out.extend_from_slice(&len.to_le_bytes());
                out.extend_from_slice(payload);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Corrupt("bad magic".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Corrupt(format!("unsupported version {version}")));
        }
        let flags = r.u8()?;
        if flags & !(FLAG_COLOR | FLAG_ABU) != 0 {
            return Err(Error::Corrupt(format!("unknown flags {flags:#04x}")));
        }
        let header = BitstreamHeader {
            with_color: flags & FLAG_COLOR != 0,
            abu: flags & FLAG_ABU != 0,
            precision: r.u8()?,
            blk_size: r.u16()?,
            sf: r.f32()?,
            qs: r.f32()?,
            model_id: r.u8()?,
            block_count: r.u32()?,
        };
        if header.blk_size == 0 || !(header.sf >= 1.0 && header.sf.is_finite()) || !(header.qs > 0.0 && header.qs.is_finite()) {
            return Err(Error::Corrupt("invalid header parameters".into()));
        }
        // every record takes at least 23 bytes; reject absurd counts before allocating
        if header.block_count as usize > bytes.len() / 23 + 1 {
            return Err(Error::Corrupt("block count exceeds stream length".into()));
        }
        let mut records = Vec::with_capacity(header.block_count as usize);
        for _ in 0..header.block_count {
            let grid = [r.u16()?, r.u16()?, r.u16()?];
            let k_codec = r.u32()?;
            if k_codec == 0 {
                return Err(Error::Corrupt("record with k_codec = 0".into()));
            }
            let k_abu = r.u32()?;
            let mask = r.u8()?;
            let side_len = r.u32()? as usize;
            let side = r.take(side_len)?.to_vec();
            let main_len = r.u32()? as usize;
            let main = r.take(main_len)?.to_vec();
            records.push(BlockRecord {
                grid,
                k_codec,
                k_abu,
                mask,
                side,
                main,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Bitstream { header, records })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Bitstream {
        Bitstream {
            header: BitstreamHeader {
                with_color: true,
                abu: false,
                precision: 10,
                blk_size: 64,
                sf: 2.0,
                qs: 1.25,
                model_id: 3,
                block_count: 2,
            },
            records: vec![
                BlockRecord {
                    grid: [0, 1, 2],
                    k_codec: 100,
                    k_abu: 0,
                    mask: 0b1010_0101,
                    side: vec![1, 2, 3],
                    main: vec![],
                },
                BlockRecord {
                    grid: [7, 0, 65535],
                    k_codec: 1,
                    k_abu: 9,
                    mask: 0xFF,
                    side: vec![],
                    main: vec![9; 40],
                },
            ],
        }
    }

    #[test]
    fn exact_header_bytes() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"IPCC");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 0b01);
        assert_eq!(bytes[6], 10);
        assert_eq!(&bytes[7..9], &[64, 0]);
        assert_eq!(&bytes[9..13], &2.0f32.to_le_bytes());
        assert_eq!(&bytes[13..17], &1.25f32.to_le_bytes());
        assert_eq!(bytes[17], 3);
        assert_eq!(&bytes[18..22], &[2, 0, 0, 0]);
        assert_eq!(HEADER_LEN, 22);
        // first record: grid, k_codec=100, k_abu=0, mask, side len 3
        assert_eq!(&bytes[22..28], &[0, 0, 1, 0, 2, 0]);
        assert_eq!(&bytes[28..32], &[100, 0, 0, 0]);
        assert_eq!(bytes[36], 0b1010_0101);
        assert_eq!(&bytes[37..44], &[3, 0, 0, 0, 1, 2, 3]);
        assert_eq!(bytes.len(), 22 + (6 + 4 + 4 + 1 + 4 + 4) * 2 + 3 + 40);
    }

    #[test]
    fn round_trip() {
        let b = sample();
        assert_eq!(Bitstream::from_bytes(&b.to_bytes().unwrap()).unwrap(), b);
    }

    #[test]
    fn framing_errors() {
        let bytes = sample().to_bytes().unwrap();
        for cut in 0..bytes.len() {
            assert!(Bitstream::from_bytes(&bytes[..cut]).is_err(), "prefix of {cut} bytes accepted");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Bitstream::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Bitstream::from_bytes(&magic).is_err());
        let mut version = bytes.clone();
        version[4] = 2;
        assert!(Bitstream::from_bytes(&version).is_err());
        let mut flags = bytes;
        flags[5] = 4;
        assert!(Bitstream::from_bytes(&flags).is_err());
    }

    #[test]
    fn count_must_match() {
        let mut b = sample();
        b.header.block_count = 3;
        assert!(b.to_bytes().is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let _ = Bitstream::from_bytes(&bytes);
        }

        #[test]
        fn record_round_trip(grid in any::<[u16; 3]>(), k in 1u32.., ka in any::<u32>(), mask in any::<u8>(),
                             side in proptest::collection::vec(any::<u8>(), 0..50),
                             main in proptest::collection::vec(any::<u8>(), 0..50)) {
            let mut b = sample();
            b.records[0] = BlockRecord { grid, k_codec: k, k_abu: ka, mask, side, main };
            prop_assert_eq!(Bitstream::from_bytes(&b.to_bytes().unwrap()).unwrap(), b);
        }
    }
}
