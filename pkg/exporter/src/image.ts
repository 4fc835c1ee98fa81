/**
 * Minimal patch image readers: 8-bit PNG (gray, RGB, RGBA; non-interlaced)
 * and binary PPM (P6). Everything is returned as interleaved RGB.
 */

import * as fs from 'fs'
import * as zlib from 'zlib'

export interface RgbImage {
  width: number
  height: number
  /** Interleaved RGB, length = width * height * 3. */
  pixels: Uint8Array
}

const PNG_SIGNATURE = Buffer.from([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a])

export function readImage(path: string): RgbImage {
  const buf = fs.readFileSync(path)
  if (path.toLowerCase().endsWith('.png')) return decodePng(buf)
  if (path.toLowerCase().endsWith('.ppm')) return decodePpm(buf)
  throw new Error(`unsupported image extension: ${path}`)
}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c
  const pa = Math.abs(p - a)
  const pb = Math.abs(p - b)
  const pc = Math.abs(p - c)
  if (pa <= pb && pa <= pc) return a
  if (pb <= pc) return b
  return c
}

export function decodePng(buf: Buffer): RgbImage {
  if (buf.length < 8 || !buf.subarray(0, 8).equals(PNG_SIGNATURE)) {
    throw new Error('not a PNG file')
  }
  let width = 0
  let height = 0
  let channels = 0
  const idat: Buffer[] = []
  let off = 8
  while (off + 8 <= buf.length) {
    const length = buf.readUInt32BE(off)
    const type = buf.toString('ascii', off + 4, off + 8)
    const data = buf.subarray(off + 8, off + 8 + length)
    if (type === 'IHDR') {
      width = data.readUInt32BE(0)
      height = data.readUInt32BE(4)
      const bitDepth = data[8]
      const colorType = data[9]
      if (bitDepth !== 8) throw new Error(`unsupported PNG bit depth ${bitDepth}`)
      if (data[12] !== 0) throw new Error('interlaced PNG is not supported')
      if (colorType === 0) channels = 1
      else if (colorType === 2) channels = 3
      else if (colorType === 6) channels = 4
      else throw new Error(`unsupported PNG color type ${colorType}`)
    } else if (type === 'IDAT') {
      idat.push(data)
    } else if (type === 'IEND') {
      break
    }
    off += 12 + length
  }
  if (width === 0 || height === 0 || channels === 0) throw new Error('PNG missing IHDR')
  if (idat.length === 0) throw new Error('PNG missing IDAT')

  const raw = zlib.inflateSync(Buffer.concat(idat))
  const stride = width * channels
  if (raw.length !== height * (stride + 1)) {
    throw new Error(`PNG scanline data length ${raw.length}, expected ${height * (stride + 1)}`)
  }
  const lines = new Uint8Array(height * stride)
  for (let y = 0; y < height; y++) {
    const filter = raw[y * (stride + 1)]
    const src = y * (stride + 1) + 1
    const dst = y * stride
    for (let i = 0; i < stride; i++) {
      const x = raw[src + i]
      const left = i >= channels ? lines[dst + i - channels] : 0
      const up = y > 0 ? lines[dst + i - stride] : 0
      const upLeft = y > 0 && i >= channels ? lines[dst + i - stride - channels] : 0
      let value: number
      if (filter === 0) value = x
      else if (filter === 1) value = x + left
      else if (filter === 2) value = x + up
      else if (filter === 3) value = x + ((left + up) >> 1)
      else if (filter === 4) value = x + paeth(left, up, upLeft)
      else throw new Error(`unsupported PNG filter type ${filter}`)
      lines[dst + i] = value & 0xff
    }
  }

  const pixels = new Uint8Array(width * height * 3)
  for (let p = 0; p < width * height; p++) {
    if (channels === 1) {
      pixels[p * 3] = pixels[p * 3 + 1] = pixels[p * 3 + 2] = lines[p]
    } else {
      pixels[p * 3] = lines[p * channels]
      pixels[p * 3 + 1] = lines[p * channels + 1]
      pixels[p * 3 + 2] = lines[p * channels + 2]
    }
  }
  return { width, height, pixels }
}

export function decodePpm(buf: Buffer): RgbImage {
  // Header: "P6", then width, height, maxval as whitespace-separated
  // tokens ('#' comments allowed), then one whitespace byte before the
  // raw RGB payload.
  let off = 0
  const isSpace = (c: number) => c === 0x20 || c === 0x09 || c === 0x0a || c === 0x0d
  const token = (): string => {
    while (off < buf.length) {
      const c = buf[off]
      if (c === 0x23) {
        while (off < buf.length && buf[off] !== 0x0a) off++
      } else if (isSpace(c)) {
        off++
      } else {
        break
      }
    }
    const start = off
    while (off < buf.length && !isSpace(buf[off])) off++
    if (start === off) throw new Error('truncated PPM header')
    return buf.toString('ascii', start, off)
  }
  if (token() !== 'P6') throw new Error('not a binary PPM (P6) file')
  const width = parseInt(token(), 10)
  const height = parseInt(token(), 10)
  const maxval = parseInt(token(), 10)
  if (!(width > 0 && height > 0)) throw new Error('bad PPM dimensions')
  if (maxval !== 255) throw new Error(`unsupported PPM maxval ${maxval}`)
  off += 1
  const need = width * height * 3
  if (buf.length - off !== need) {
    throw new Error(`PPM payload is ${buf.length - off} bytes, expected ${need}`)
  }
  return { width, height, pixels: new Uint8Array(buf.subarray(off, off + need)) }
}
