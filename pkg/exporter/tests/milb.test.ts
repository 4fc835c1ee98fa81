import { describe, expect, it } from 'vitest'

import { bagByteLength, decodeBag, encodeBag, HEADER_SIZE } from '../src/milb'

function sampleBag(n: number, dim: number) {
  const coords: Array<[number, number]> = []
  const embeddings: Float32Array[] = []
  for (let i = 0; i < n; i++) {
    coords.push([(i % 7) * 224, Math.floor(i / 7) * 224])
    const row = new Float32Array(dim)
    for (let j = 0; j < dim; j++) row[j] = Math.fround(Math.sin(i * dim + j))
    embeddings.push(row)
  }
  return { coords, embeddings }
}

describe('bag encoding', () => {
  it('round trips coordinates and embeddings exactly', () => {
    const bag = sampleBag(17, 24)
    const back = decodeBag(encodeBag(bag))
    expect(back.coords).toEqual(bag.coords)
    expect(back.embeddings.length).toBe(17)
    back.embeddings.forEach((row, i) => expect(row).toEqual(bag.embeddings[i]))
  })

  it('emits exactly n*dim*4 payload bytes after header and coordinates', () => {
    const n = 1000
    const dim = 1024
    const buf = encodeBag(sampleBag(n, dim))
    expect(buf.length - HEADER_SIZE - n * 8).toBe(n * dim * 4)
    expect(buf.length).toBe(bagByteLength(n, dim))
  })

  it('rejects corrupted magic', () => {
    const buf = encodeBag(sampleBag(3, 4))
    buf.write('XILB', 0, 'ascii')
    expect(() => decodeBag(buf)).toThrow(/bad magic/)
  })

  it('rejects truncation', () => {
    const buf = encodeBag(sampleBag(3, 4))
    expect(() => decodeBag(buf.subarray(0, 10))).toThrow(/truncated header/)
    expect(() => decodeBag(buf.subarray(0, buf.length - 5))).toThrow(/expected \d+ bytes/)
  })

  it('rejects malformed bags before writing', () => {
    expect(() => encodeBag({ coords: [], embeddings: [] })).toThrow(/no patches/)
    expect(() =>
      encodeBag({ coords: [[0, 0]], embeddings: [new Float32Array([1]), new Float32Array([2])] }),
    ).toThrow(/1 coordinates for 2/)
    expect(() =>
      encodeBag({
        coords: [
          [0, 0],
          [1, 1],
        ],
        embeddings: [new Float32Array([1, 2]), new Float32Array([3])],
      }),
    ).toThrow(/ragged/)
    expect(() =>
      encodeBag({ coords: [[0, 0]], embeddings: [new Float32Array([NaN])] }),
    ).toThrow(/non-finite/)
  })
})
