/** Rendering: gallery cards, magnification rows, and the stats panel.
 *
 * Cards appear in exactly the order the service returned them; no
 * client-side re-sorting. Border state is a pure function of the hit
 * label and the user-entered true label.
 */

import type { Hit, IndexStats, QueryResponse } from './api.js'

export type BorderState = 'match' | 'mismatch' | 'unknown'

export function borderState(hitLabel: string, trueLabel: string | null): BorderState {
  if (!trueLabel) return 'unknown'
  return hitLabel === trueLabel ? 'match' : 'mismatch'
}

/** Group hits by magnification, preserving response order within and across groups. */
export function groupByMagnification(hits: Hit[]): Array<[string, Hit[]]> {
  const groups: Array<[string, Hit[]]> = []
  const seen = new Map<string, Hit[]>()
  for (const hit of hits) {
    let bucket = seen.get(hit.magnification)
    if (!bucket) {
      bucket = []
      seen.set(hit.magnification, bucket)
      groups.push([hit.magnification, bucket])
    }
    bucket.push(hit)
  }
  return groups
}

function card(doc: Document, hit: Hit, trueLabel: string | null): HTMLElement {
  const state = borderState(hit.label, trueLabel)
  const element = doc.createElement('figure')
  element.className = `card border-${state}`
  element.dataset.entryId = hit.entry_id
  element.dataset.border = state

  const img = doc.createElement('img')
  img.alt = hit.entry_id
  if (hit.thumbnail_url) img.src = hit.thumbnail_url
  element.appendChild(img)

  const caption = doc.createElement('figcaption')
  const distance = doc.createElement('span')
  distance.className = 'distance'
  distance.textContent = `d=${hit.distance.toFixed(3)}`
  const label = doc.createElement('span')
  label.className = `label label-${hit.label}`
  label.textContent = hit.label
  const magnification = doc.createElement('span')
  magnification.className = 'magnification'
  magnification.textContent = hit.magnification
  caption.append(distance, label, magnification)
  element.appendChild(caption)
  return element
}

export function renderGallery(
  container: HTMLElement,
  response: QueryResponse,
  trueLabel: string | null,
): void {
  const doc = container.ownerDocument
  container.replaceChildren()
  if (response.grouped_by_magnification) {
    for (const [magnification, hits] of groupByMagnification(response.hits)) {
      const row = doc.createElement('section')
      row.className = 'magnification-row'
      row.dataset.magnification = magnification
      const heading = doc.createElement('h3')
      heading.textContent = magnification
      row.appendChild(heading)
      const strip = doc.createElement('div')
      strip.className = 'strip'
      for (const hit of hits) strip.appendChild(card(doc, hit, trueLabel))
      row.appendChild(strip)
      container.appendChild(row)
    }
  } else {
    const strip = doc.createElement('div')
    strip.className = 'strip'
    for (const hit of response.hits) strip.appendChild(card(doc, hit, trueLabel))
    container.appendChild(strip)
  }
}

export function renderElapsed(target: HTMLElement, response: QueryResponse): void {
  const ms = response.elapsed_seconds * 1000
  target.textContent = `${response.hits.length} hits in ${ms.toFixed(1)} ms`
}

export function renderStats(panel: HTMLElement, stats: IndexStats | null): void {
  const doc = panel.ownerDocument
  panel.replaceChildren()
  if (!stats || stats.entries === 0) {
    const guidance = doc.createElement('p')
    guidance.className = 'guidance'
    guidance.textContent =
      'The index is empty. Build one with: fedsearch index --model <model> ' +
      '--manifest <manifest> --out <index>, then restart the service.'
    panel.appendChild(guidance)
    return
  }
  const list = doc.createElement('dl')
  const pair = (term: string, value: string) => {
    const dt = doc.createElement('dt')
    dt.textContent = term
    const dd = doc.createElement('dd')
    dd.textContent = value
    list.append(dt, dd)
  }
  pair('entries', String(stats.entries))
  for (const [label, count] of Object.entries(stats.per_label)) pair(label, String(count))
  for (const [magnification, count] of Object.entries(stats.per_magnification))
    pair(magnification, String(count))
  pair('layout', stats.layout_id)
  panel.appendChild(list)
}

export function renderError(banner: HTMLElement, message: string | null): void {
  banner.textContent = message ?? ''
  banner.hidden = message === null
}
