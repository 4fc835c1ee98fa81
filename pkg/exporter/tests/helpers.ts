/** Test-only encoders so the decoders can be exercised without fixtures. */

import * as zlib from 'zlib'

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c
  const pa = Math.abs(p - a)
  const pb = Math.abs(p - b)
  const pc = Math.abs(p - c)
  if (pa <= pb && pa <= pc) return a
  if (pb <= pc) return b
  return c
}

function chunk(type: string, data: Buffer): Buffer {
  const head = Buffer.alloc(8)
  head.writeUInt32BE(data.length, 0)
  head.write(type, 4, 'ascii')
  const crc = Buffer.alloc(4) // decoder ignores checksums
  return Buffer.concat([head, data, crc])
}

export function buildPng(
  width: number,
  height: number,
  pixels: Uint8Array,
  options: { colorType?: number; filter?: number } = {},
): Buffer {
  const colorType = options.colorType ?? 2
  const filter = options.filter ?? 0
  const channels = colorType === 0 ? 1 : colorType === 2 ? 3 : 4
  if (pixels.length !== width * height * channels) {
    throw new Error('pixel buffer does not match dimensions')
  }
  const stride = width * channels
  const raw = Buffer.alloc(height * (stride + 1))
  for (let y = 0; y < height; y++) {
    raw[y * (stride + 1)] = filter
    for (let i = 0; i < stride; i++) {
      const v = pixels[y * stride + i]
      const left = i >= channels ? pixels[y * stride + i - channels] : 0
      const up = y > 0 ? pixels[(y - 1) * stride + i] : 0
      const upLeft = y > 0 && i >= channels ? pixels[(y - 1) * stride + i - channels] : 0
      let encoded: number
      if (filter === 0) encoded = v
      else if (filter === 1) encoded = v - left
      else if (filter === 2) encoded = v - up
      else if (filter === 3) encoded = v - ((left + up) >> 1)
      else encoded = v - paeth(left, up, upLeft)
      raw[y * (stride + 1) + 1 + i] = encoded & 0xff
    }
  }
  const ihdr = Buffer.alloc(13)
  ihdr.writeUInt32BE(width, 0)
  ihdr.writeUInt32BE(height, 4)
  ihdr[8] = 8
  ihdr[9] = colorType
  ihdr[10] = 0
  ihdr[11] = 0
  ihdr[12] = 0
  return Buffer.concat([
    Buffer.from([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]),
    chunk('IHDR', ihdr),
    chunk('IDAT', zlib.deflateSync(raw)),
    chunk('IEND', Buffer.alloc(0)),
  ])
}

export function buildPpm(width: number, height: number, pixels: Uint8Array, comment = ''): Buffer {
  const note = comment ? `# ${comment}\n` : ''
  const header = Buffer.from(`P6\n${note}${width} ${height}\n255\n`, 'ascii')
  return Buffer.concat([header, Buffer.from(pixels)])
}

export function randomPixels(count: number, seed: number): Uint8Array {
  const out = new Uint8Array(count)
  let state = seed >>> 0
  for (let i = 0; i < count; i++) {
    state = (Math.imul(state, 1664525) + 1013904223) >>> 0
    out[i] = state >>> 24
  }
  return out
}
