/**
 * Bag binary format ("MILB").
 *
 * Layout: a 16-byte little-endian header (magic "MILB", u16 version, u16
 * reserved zero, u32 patch count, u32 embedding dim), then n (x, y) pairs
 * as u32, then the n x dim embedding matrix as float32 rows. Row order
 * matches coordinate order.
 */

export interface Bag {
  /** (x, y) per patch, row-aligned with embeddings. */
  coords: Array<[number, number]>
  /** One row of length dim per patch. */
  embeddings: Float32Array[]
}

export const MAGIC = 'MILB'
export const VERSION = 1
export const HEADER_SIZE = 16

export function bagByteLength(nPatches: number, dim: number): number {
  return HEADER_SIZE + nPatches * 8 + nPatches * dim * 4
}

export function encodeBag(bag: Bag): Buffer {
  const n = bag.embeddings.length
  if (n === 0) throw new Error('bag contains no patches')
  if (bag.coords.length !== n) {
    throw new Error(`${bag.coords.length} coordinates for ${n} embedding rows`)
  }
  const dim = bag.embeddings[0].length
  if (dim === 0) throw new Error('embedding dimension is zero')
  const buf = Buffer.alloc(bagByteLength(n, dim))
  buf.write(MAGIC, 0, 'ascii')
  buf.writeUInt16LE(VERSION, 4)
  buf.writeUInt16LE(0, 6)
  buf.writeUInt32LE(n, 8)
  buf.writeUInt32LE(dim, 12)
  let off = HEADER_SIZE
  for (const [x, y] of bag.coords) {
    if (!Number.isInteger(x) || !Number.isInteger(y) || x < 0 || y < 0) {
      throw new Error(`coordinates must be non-negative integers, got (${x}, ${y})`)
    }
    buf.writeUInt32LE(x, off)
    buf.writeUInt32LE(y, off + 4)
    off += 8
  }
  for (const row of bag.embeddings) {
    if (row.length !== dim) {
      throw new Error(`ragged embedding rows: ${row.length} vs ${dim}`)
    }
    for (let j = 0; j < dim; j++) {
      if (!Number.isFinite(row[j])) throw new Error('embeddings contain non-finite values')
      buf.writeFloatLE(row[j], off)
      off += 4
    }
  }
  return buf
}

export function decodeBag(buf: Buffer): Bag {
  if (buf.length < HEADER_SIZE) {
    throw new Error(`truncated header (${buf.length} bytes)`)
  }
  const magic = buf.toString('ascii', 0, 4)
  if (magic !== MAGIC) throw new Error(`bad magic ${JSON.stringify(magic)}`)
  const version = buf.readUInt16LE(4)
  if (version !== VERSION) throw new Error(`unsupported version ${version}`)
  const reserved = buf.readUInt16LE(6)
  if (reserved !== 0) throw new Error(`reserved field must be zero, got ${reserved}`)
  const n = buf.readUInt32LE(8)
  const dim = buf.readUInt32LE(12)
  if (n === 0) throw new Error('bag contains no patches')
  if (dim === 0) throw new Error('embedding dimension is zero')
  const expected = bagByteLength(n, dim)
  if (buf.length !== expected) {
    throw new Error(`expected ${expected} bytes for ${n} patches of dim ${dim}, got ${buf.length}`)
  }
  const coords: Array<[number, number]> = []
  let off = HEADER_SIZE
  for (let i = 0; i < n; i++) {
    coords.push([buf.readUInt32LE(off), buf.readUInt32LE(off + 4)])
    off += 8
  }
  const embeddings: Float32Array[] = []
  for (let i = 0; i < n; i++) {
    const row = new Float32Array(dim)
    for (let j = 0; j < dim; j++) {
      row[j] = buf.readFloatLE(off)
      off += 4
    }
    if (!row.every(Number.isFinite)) throw new Error('embeddings contain non-finite values')
    embeddings.push(row)
  }
  return { coords, embeddings }
}
