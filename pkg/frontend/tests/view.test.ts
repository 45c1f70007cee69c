// @vitest-environment jsdom
import { describe, expect, it } from 'vitest'

import type { Hit, QueryResponse } from '../src/api.js'
import { borderState, groupByMagnification, renderGallery, renderStats } from '../src/view.js'

function hit(overrides: Partial<Hit> = {}): Hit {
  return {
    entry_id: 'e0',
    distance: 1.0,
    label: 'benign',
    magnification: '40x',
    center: 'c',
    thumbnail_url: null,
    ...overrides,
  }
}

function response(hits: Hit[], grouped = false): QueryResponse {
  return {
    hits,
    elapsed_seconds: 0.01,
    grouped_by_magnification: grouped,
    k: hits.length,
    scenario: grouped ? 'sen2' : 'sen1',
    true_label: null,
  }
}

describe('borderState', () => {
  it('is unknown without a true label', () => {
    expect(borderState('benign', null)).toBe('unknown')
    expect(borderState('malignant', '')).toBe('unknown')
  })

  it('matches only when labels agree', () => {
    expect(borderState('benign', 'benign')).toBe('match')
    expect(borderState('malignant', 'malignant')).toBe('match')
    expect(borderState('benign', 'malignant')).toBe('mismatch')
    expect(borderState('malignant', 'benign')).toBe('mismatch')
  })
})

describe('groupByMagnification', () => {
  it('preserves response order within and across groups', () => {
    const hits = [
      hit({ entry_id: 'a', magnification: '40x' }),
      hit({ entry_id: 'b', magnification: '40x' }),
      hit({ entry_id: 'c', magnification: '100x' }),
      hit({ entry_id: 'd', magnification: '100x' }),
    ]
    const groups = groupByMagnification(hits)
    expect(groups.map(([m]) => m)).toEqual(['40x', '100x'])
    expect(groups[0][1].map((h) => h.entry_id)).toEqual(['a', 'b'])
    expect(groups[1][1].map((h) => h.entry_id)).toEqual(['c', 'd'])
  })
})

describe('renderGallery', () => {
  it('renders cards in response order without re-sorting', () => {
    const container = document.createElement('div')
    const hits = [
      hit({ entry_id: 'far', distance: 9.0 }),
      hit({ entry_id: 'near', distance: 0.5 }),
      hit({ entry_id: 'mid', distance: 3.0 }),
    ]
    renderGallery(container, response(hits), null)
    const ids = [...container.querySelectorAll<HTMLElement>('.card')].map(
      (c) => c.dataset.entryId,
    )
    expect(ids).toEqual(['far', 'near', 'mid'])
  })

  it('applies the border rule per card', () => {
    const container = document.createElement('div')
    const hits = [
      hit({ entry_id: 'a', label: 'malignant' }),
      hit({ entry_id: 'b', label: 'benign' }),
    ]
    renderGallery(container, response(hits), 'malignant')
    const cards = [...container.querySelectorAll<HTMLElement>('.card')]
    expect(cards[0].dataset.border).toBe('match')
    expect(cards[0].classList.contains('border-match')).toBe(true)
    expect(cards[1].dataset.border).toBe('mismatch')
    expect(cards[1].classList.contains('border-mismatch')).toBe(true)
  })

  it('renders one row per magnification for grouped responses', () => {
    const container = document.createElement('div')
    const hits = [
      hit({ entry_id: 'a', magnification: '40x' }),
      hit({ entry_id: 'b', magnification: '100x' }),
      hit({ entry_id: 'c', magnification: '200x' }),
      hit({ entry_id: 'd', magnification: '400x' }),
    ]
    renderGallery(container, response(hits, true), null)
    const rows = [...container.querySelectorAll<HTMLElement>('.magnification-row')]
    expect(rows.map((r) => r.dataset.magnification)).toEqual(['40x', '100x', '200x', '400x'])
    for (const row of rows) expect(row.querySelectorAll('.card').length).toBe(1)
  })
})

describe('renderStats', () => {
  it('shows guidance for an empty index', () => {
    const panel = document.createElement('div')
    renderStats(panel, null)
    expect(panel.querySelector('.guidance')?.textContent).toContain('fedsearch index')
  })

  it('lists counts and the layout id', () => {
    const panel = document.createElement('div')
    renderStats(panel, {
      entries: 12,
      per_label: { benign: 5, malignant: 7 },
      per_magnification: { '40x': 12 },
      layout_id: 'abcd1234',
    })
    expect(panel.textContent).toContain('12')
    expect(panel.textContent).toContain('malignant')
    expect(panel.textContent).toContain('abcd1234')
  })
})
