//! The raw record container: write tagged records, corrupt one, read back.

use mpt::container::{write_container, ContainerReader, Encoder, FileKind, Header, Record};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("demo.mpt");
    let header = Header {
        kind: FileKind::Shard,
        joints: 17,
        coarse_vertices: 0,
        full_vertices: 0,
        record_count: 0,
        global_seed: 5,
        rig_crc: 0,
    };
    let records: Vec<Record> = (0..3u32)
        .map(|i| Record {
            tag: *b"META",
            payload: Encoder::new().u32(i).str("hello").finish(),
        })
        .collect();
    write_container(&path, header, &records)?;

    let mut bytes = std::fs::read(&path)?;
    let second = 48 + (8 + records[0].payload.len() + 4) + 8;
    bytes[second] ^= 0xff;
    std::fs::write(&path, &bytes)?;

    for (i, r) in ContainerReader::open(&path)? {
        match r {
            Ok(r) => println!("record {i}: {} bytes", r.payload.len()),
            Err(e) => println!("record {i}: {e}"),
        }
    }
    Ok(())
}
